#    clinaudit - A safety audit toolkit for clinical classifiers and language models
#    Copyright (C) 2026  The clinaudit authors

#    This program is free software: you can redistribute it and/or modify
#    it under the terms of the GNU General Public License as published by
#    the Free Software Foundation, either version 3 of the License, or
#    (at your option) any later version.

#    This program is distributed in the hope that it will be useful,
#    but WITHOUT ANY WARRANTY; without even the implied warranty of
#    MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
#    GNU General Public License for more details.

#    You should have received a copy of the GNU General Public License
#    along with this program.  If not, see <https://www.gnu.org/licenses/>.

from typing import Optional
from .constants import EXIT_FAILURE, EXIT_VALIDATION, EXIT_IO, EXIT_ENDPOINT, BODY_EXCERPT


class AuditError(Exception):
    exit_code = EXIT_FAILURE


class ValidationError(AuditError, ValueError):
    exit_code = EXIT_VALIDATION


class DimensionError(ValidationError):
    def __init__(self, message: str, axis: Optional[str] = None):
        """
        Raised when tensor or image shapes disagree.

        @param message: Description of the mismatch.
        @param axis: Name of the offending axis, if one can be singled out.
        """
        if axis is not None:
            message = f"{message} (axis {axis})"
        super().__init__(message)
        self.axis = axis


class UsageError(ValidationError):
    pass


class TrainingDivergedError(ValidationError):
    pass


class AuditIOError(AuditError, OSError):
    exit_code = EXIT_IO


class EndpointError(AuditError):
    exit_code = EXIT_ENDPOINT

    def __init__(self, message: str, status: Optional[int] = None, body: str = '', attempts: int = 0):
        """
        Raised when a completion endpoint cannot produce an answer.

        @param message: Description of the failure.
        @param status: HTTP status, or None for transport failures.
        @param body: Response body; only an excerpt is kept.
        @param attempts: Number of requests sent before giving up.
        """
        self.status = status
        self.body_excerpt = body[:BODY_EXCERPT]
        self.attempts = attempts

        if status is not None:
            message = f"{message} [HTTP {status}]"
        if self.body_excerpt:
            message = f"{message}: {self.body_excerpt}"

        super().__init__(message)
