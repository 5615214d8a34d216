"""Desk-scale toolkit for crystal-to-XAS prediction and XAS-to-structure inference."""

__version__ = "0.1.0"
