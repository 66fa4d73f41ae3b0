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

from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union
import json
import logging

import numpy as np

from src.tube_mpc.errors import ModelError
from src.tube_mpc.geometry import HPolytope, VPolytope
from src.tube_mpc.model import ProblemData, QuadraticBasisModel
from src.tube_mpc.terminal import TerminalParams

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_POLYTOPES = ("X", "U", "Theta0", "S", "Vset", "Xhat", "Uhat")


def save_json(obj: Dict[str, Any], path: PathLike) -> Path:
    """Writes `obj` as indented JSON, creating parent folders."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2))
    return path


def load_json(path: PathLike) -> Optional[Dict[str, Any]]:
    """Reads a JSON file.

    Args:
        path (PathLike): File to read.

    Returns:
        Optional[Dict[str, Any]]: Parsed object. If the file is missing or not valid
            JSON, returns `None`.
    """
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        logger.warning(f"Could not read {path}: {exc}")
        return None


def polytope_to_dict(hp: HPolytope) -> Dict[str, Any]:
    # dim is stored separately since the full space has no rows
    return {"H": hp.H.tolist(), "h": hp.h.tolist(), "dim": hp.dim}


def polytope_from_dict(data: Dict[str, Any]) -> HPolytope:
    H = np.asarray(data["H"], dtype=float).reshape(-1, int(data["dim"]))
    return HPolytope(H, np.asarray(data["h"], dtype=float))


def problem_to_dict(pd: ProblemData) -> Dict[str, Any]:
    """Serializes a problem whose model is a QuadraticBasisModel.

    Raises:
        ModelError: The model has no serialized form.
    """
    m = pd.model
    if not isinstance(m, QuadraticBasisModel):
        raise ModelError(f"Cannot serialize model of type {type(m).__name__}")
    out: Dict[str, Any] = {
        "model": {
            "type": "quadratic",
            "A": m.A.tolist(),
            "B": m.B.tolist(),
            "j_indices": list(m.j_indices),
            "xhat_bound": m.xhat_bound,
        },
        "W": pd.W.vertices.tolist(),
        "Q": pd.Q.tolist(),
        "R": pd.R.tolist(),
        "N": pd.N,
    }
    for name in _POLYTOPES:
        out[name] = polytope_to_dict(getattr(pd, name))
    return out


def problem_from_dict(data: Dict[str, Any]) -> ProblemData:
    spec = data["model"]
    if spec.get("type") != "quadratic":
        raise ModelError(f"Unknown model type {spec.get('type')!r}")
    model = QuadraticBasisModel(spec["A"], spec["B"], spec["j_indices"], spec["xhat_bound"])
    sets = {name: polytope_from_dict(data[name]) for name in _POLYTOPES}
    return ProblemData(
        model=model,
        W=VPolytope(np.asarray(data["W"], dtype=float)),
        Q=np.asarray(data["Q"], dtype=float),
        R=np.asarray(data["R"], dtype=float),
        N=int(data["N"]),
        **sets,
    )


def save_problem(
    pd: ProblemData, path: PathLike, extra: Optional[Dict[str, Any]] = None
) -> Path:
    """Writes a problem file; `extra` entries (e.g. the hidden truth) are stored
    alongside."""
    return save_json({**problem_to_dict(pd), **(extra or {})}, path)


def load_problem(path: PathLike) -> Optional[Tuple[ProblemData, Dict[str, Any]]]:
    """Reads a problem file.

    Returns:
        Optional[Tuple[ProblemData, Dict[str, Any]]]: Problem and the remaining
            top-level entries. If the file is missing, returns `None`.
    """
    data = load_json(path)
    if data is None:
        return None
    pd = problem_from_dict(data)
    known = set(_POLYTOPES) | {"model", "W", "Q", "R", "N"}
    return pd, {k: v for k, v in data.items() if k not in known}


def save_params(params: TerminalParams, path: PathLike) -> Path:
    """Writes a terminal design to a `.npz` archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f.name: np.asarray(getattr(params, f.name)) for f in fields(params)}
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_params(path: PathLike) -> Optional[TerminalParams]:
    """Reads a terminal design written by `save_params`.

    Returns:
        Optional[TerminalParams]: The design. If the file is missing, returns `None`.
    """
    try:
        archive = np.load(Path(path))
    except OSError as exc:
        logger.warning(f"Could not read {path}: {exc}")
        return None
    with archive:
        values: Dict[str, Any] = {}
        for f in fields(TerminalParams):
            arr = archive[f.name]
            values[f.name] = arr.item() if arr.ndim == 0 else arr.copy()
    values["N_hat"] = int(values["N_hat"])
    return TerminalParams(**values)
