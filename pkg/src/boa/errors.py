"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command line:
1 for domain-level failures, 2 for bad input, 3 for store and I/O trouble.
"""

from __future__ import annotations


class BoaError(Exception):
    exit_code = 1


class InputError(BoaError):
    """The caller supplied something malformed."""

    exit_code = 2


# -- domain model -----------------------------------------------------------

class InvalidName(InputError):
    pass


class InvalidPlatform(InputError):
    pass


class EmptyPlatformSet(InputError):
    pass


class InvalidDomain(InputError):
    pass


class DuplicateProject(InputError):
    pass


class UnknownProject(InputError):
    pass


class UnknownVersion(InputError):
    pass


class UnknownPlatform(InputError):
    pass


class DependencyCycle(BoaError):
    def __init__(self, members: list[str]):
        self.members = list(members)
        super().__init__("dependency cycle: " + " -> ".join(self.members + self.members[:1]))


class UnsatisfiableConstraint(BoaError):
    def __init__(self, project: str, constraints: list[str], available: list[str]):
        self.project = project
        self.constraints = list(constraints)
        self.available = list(available)
        super().__init__(
            f"no version of {project!r} satisfies {', '.join(self.constraints)}"
            f" (available: {', '.join(self.available) or 'none'})"
        )


class IllegalTransition(BoaError):
    def __init__(self, old, new):
        self.old = old
        self.new = new
        super().__init__(f"illegal transition {old.value} -> {new.value}")


# -- state store --------------------------------------------------------------

class StoreError(BoaError):
    exit_code = 3


class NotAStore(StoreError):
    pass


class IncompatibleStoreVersion(StoreError):
    pass


class StoreLocked(StoreError):
    pass


class ReadOnlyStore(StoreError):
    pass


class UnknownDomain(StoreError):
    pass


class CorruptRecord(StoreError):
    pass


# -- session --------------------------------------------------------------------

class SessionError(BoaError):
    pass


class SpawnFailed(SessionError):
    exit_code = 3


class SessionClosed(SessionError):
    """Raised when a command is submitted to a session that is not open."""


class InvalidCommand(InputError):
    pass


# -- analyzer / adapters / validator / workflow --------------------------------

class RuleError(InputError):
    pass


class RuleSetMismatch(BoaError):
    pass


class UnresolvedPlaceholder(InputError):
    pass


class MissingTemplate(InputError):
    pass


class ExpectationError(InputError):
    pass


class ScenarioError(InputError):
    pass


class ParseError(ScenarioError):
    pass


class UnresolvedStepRef(ScenarioError):
    def __init__(self, ref: str, step: str | None = None):
        self.ref = ref
        self.step = step
        where = f" (in step {step!r})" if step else ""
        super().__init__(f"unresolved step reference {ref!r}{where}")


class CycleWithoutRetryBound(ScenarioError):
    pass
