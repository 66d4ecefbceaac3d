"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when inputs, files, or configuration violate a documented contract.

    The CLI maps this to exit code 2; all other exceptions map to exit code 1.
    """
