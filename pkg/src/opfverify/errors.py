"""Exception hierarchy shared by all opfverify modules."""


class OpfVerifyError(Exception):
    """Base class. ``hint`` is an optional remediation string shown by the CLI."""

    hint = None

    def __init__(self, message="", hint=None):
        super().__init__(message)
        if hint is not None:
            self.hint = hint


# lp-core
class InconsistentDimensions(OpfVerifyError):
    pass


class NumericalBreakdown(OpfVerifyError):
    pass


# grid
class SchemaError(OpfVerifyError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DisconnectedGraph(OpfVerifyError):
    pass


class InvalidSlack(OpfVerifyError):
    pass


class SingularSystem(OpfVerifyError):
    pass


# dcopf
class Infeasible(OpfVerifyError):
    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = tuple(rows)


# dataset
class EmptyBox(OpfVerifyError):
    pass


class AllInfeasible(OpfVerifyError):
    pass


# nn
class ShapeMismatch(OpfVerifyError):
    pass


class EmptyBatch(OpfVerifyError):
    pass


class EmptySplit(OpfVerifyError):
    pass


# bounds
class MissingPriorBounds(OpfVerifyError):
    pass


class BudgetZero(OpfVerifyError):
    pass


# verify
class UnboundedNeuron(OpfVerifyError):
    hint = "compute pre-activation bounds first, e.g. `opfverify tighten --method ibp`"


class RelaxationUnbounded(OpfVerifyError):
    pass


class TooManyUnstable(OpfVerifyError):
    pass


# attack
class EmptyDataset(OpfVerifyError):
    pass
