"""Structured diagnostics collected by parsers and pipeline stages."""
from __future__ import annotations

from dataclasses import dataclass, field

ERROR = "error"
WARNING = "warning"
INFO = "info"


@dataclass(frozen=True)
class Diagnostic:
    severity: str
    code: str
    message: str
    line: int | None = None

    def __str__(self) -> str:
        where = f" (line {self.line})" if self.line is not None else ""
        return f"{self.severity}: [{self.code}] {self.message}{where}"


@dataclass
class DiagnosticLog:
    items: list[Diagnostic] = field(default_factory=list)

    def add(self, severity: str, code: str, message: str, line: int | None = None) -> None:
        self.items.append(Diagnostic(severity, code, message, line))

    def error(self, code: str, message: str, line: int | None = None) -> None:
        self.add(ERROR, code, message, line)

    def warning(self, code: str, message: str, line: int | None = None) -> None:
        self.add(WARNING, code, message, line)

    def info(self, code: str, message: str, line: int | None = None) -> None:
        self.add(INFO, code, message, line)

    def extend(self, other: "DiagnosticLog") -> None:
        self.items.extend(other.items)

    @property
    def errors(self) -> list[Diagnostic]:
        return [d for d in self.items if d.severity == ERROR]

    @property
    def warnings(self) -> list[Diagnostic]:
        return [d for d in self.items if d.severity == WARNING]

    @property
    def ok(self) -> bool:
        return not self.errors

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)
