"""Shipped run configurations (TOML), accessible via importlib.resources."""
