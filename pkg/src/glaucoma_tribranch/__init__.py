"""Tri-branch glaucoma screening network."""
