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

from typing import Optional


class TubeMPCError(Exception):
    """Base class of every error raised by the library."""


class DimensionError(TubeMPCError, ValueError):
    pass


class GeometryError(TubeMPCError):
    pass


class ModelError(TubeMPCError):
    pass


class DivergentRollout(TubeMPCError):
    """Nominal rollout produced a non-finite state.

    Attributes:
        step (int): Index of the first non-finite state.
    """

    def __init__(self, step: int):
        super().__init__(f"Non-finite nominal state at step {step}")
        self.step = step


class SigmaTooSmall(TubeMPCError):
    """V^{-1} - w w^T / sigma^2 is not positive definite for a disturbance vertex."""


class TerminalDesignError(TubeMPCError):
    """Offline terminal design failed.

    Attributes:
        vertex (Optional[int]): LDI vertex index reported by an infeasible LMI check.
    """

    def __init__(self, message: str, vertex: Optional[int] = None):
        super().__init__(message)
        self.vertex = vertex


class AssemblyError(TubeMPCError):
    pass


class ValidationFailed(TubeMPCError):
    """Returned optimum violates a row of the online problem.

    Attributes:
        tag (str): Tag of the worst violated row.
        violation (float): Scaled violation of that row.
    """

    def __init__(self, tag: str, violation: float):
        super().__init__(f"Row '{tag}' violated by {violation:.3e}")
        self.tag = tag
        self.violation = violation


class InitialInfeasible(TubeMPCError):
    """No feasible perturbation sequence was found at t = 0.

    Attributes:
        max_slack (float): Smallest constraint slack reached by the repair rounds.
    """

    def __init__(self, max_slack: float):
        super().__init__(f"Initial problem infeasible, remaining slack {max_slack:.3e}")
        self.max_slack = max_slack


class EstimatorInconsistent(TubeMPCError):
    """Set-membership LP infeasible: data inconsistent with W and Theta_{t-1}.

    Attributes:
        facet (int): Facet whose LP failed.
    """

    def __init__(self, facet: int):
        super().__init__(f"Parameter set update infeasible at facet {facet}")
        self.facet = facet
