"""Discrete-event cluster scheduler simulation with preemptible fill-in jobs."""
