# Copyright 2022 [PT BOOKBOT INDONESIA](https://bookbot.id/)

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

from pathlib import Path
from typing import Any, Dict, List, Union
import json
import logging

logger = logging.getLogger(__name__)


class RunLog:
    """
    Appends closed-loop step records to a JSON-lines file.
    Each record is one StepReport plus the parameter-set offsets after the update.

    Attributes:
        path (Path): Target `.jsonl` file.
        run_id (str): Identifier stored in every record.
        records (int): Records written by this instance.
    """

    def __init__(self, path: Union[str, Path], run_id: str = ""):
        """Constructor for the `RunLog` class.

        Args:
            path (Union[str, Path]): Target `.jsonl` file, created with its parents.
            run_id (str, optional): Identifier stored in every record. Defaults to "".
        """
        self.path = Path(path)
        self.run_id = run_id
        self.records = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: Dict[str, Any]):
        """Writes `record` as one line."""
        payload = json.dumps({"run_id": self.run_id, **record})
        try:
            with self.path.open("a") as fh:
                fh.write(payload + "\n")
        except OSError as exc:
            logger.warning(f"Failed to append to {self.path}: {exc}")
        else:
            self.records += 1

    def read(self) -> List[Dict[str, Any]]:
        """All records in the file, oldest first."""
        if not self.path.exists():
            return []
        with self.path.open() as fh:
            return [json.loads(line) for line in fh if line.strip()]
