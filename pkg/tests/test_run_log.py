import logging

from src.tube_mpc.run_log import RunLog


def test_append_and_read(tmp_path):
    log = RunLog(tmp_path / "logs" / "run.jsonl", run_id="abc")
    assert log.read() == []
    log.append({"t": 0, "J_bar": [1.5]})
    log.append({"t": 1, "J_bar": []})
    assert log.records == 2
    records = log.read()
    assert [r["t"] for r in records] == [0, 1]
    assert all(r["run_id"] == "abc" for r in records)
    assert records[0]["J_bar"] == [1.5]


def test_append_failure_is_logged(tmp_path, caplog):
    # a directory cannot be opened for appending
    target = tmp_path / "taken"
    target.mkdir()
    log = RunLog(target)
    with caplog.at_level(logging.WARNING):
        log.append({"t": 0})
    assert log.records == 0
    assert "Failed to append" in caplog.text
