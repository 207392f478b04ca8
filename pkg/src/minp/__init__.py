"""One-sided score tests with MinP bootstrap inference and stepdown testing."""

__version__ = "0.1.0"
