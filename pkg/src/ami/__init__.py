"""Air Monitoring Interface: sensor backend, tool server, and chat agent."""

__version__ = "0.1.0"
