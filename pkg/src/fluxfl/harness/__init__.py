"""Command line, configuration, sweeps and property suites."""
