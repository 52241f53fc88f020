"""Prior-guided detection transformer components."""
