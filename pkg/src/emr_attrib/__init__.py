"""Attribution toolkit for recurrent risk models on hourly EMR event data."""

__version__ = "0.1.0"
