"""Zigbee home-monitoring WSN: simulator, gateway ingest and time-series store."""

__version__ = "0.1.0"
