"""Desk-scale lab for transmission-distribution coordinated AC optimal power flow."""

__version__ = "0.1.0"
