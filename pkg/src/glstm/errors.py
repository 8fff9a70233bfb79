"""Exception types shared across modules."""


class ContractError(RuntimeError):
    """A caller broke an operation's stated contract (bad schedule,
    revisited node, mismatched state tables)."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class ConfigError(ValueError):
    """A config file violates the documented schema."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
