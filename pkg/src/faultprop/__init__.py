"""Error propagation for rank-based message-passing programs."""
