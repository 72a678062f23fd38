"""Configuration, persistence, scenarios and the command-line entry point."""
