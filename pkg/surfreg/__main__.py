#!/usr/bin/env python3
"""
Entry point for the surfreg package when run as a module.
"""

from .main import app

if __name__ == "__main__":
    app()
