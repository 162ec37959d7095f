"""dtlstack: a desk-scale secure datagram stack.

Layered message-passing core, simulated constrained link with fragmentation,
plain datagram sockets, a no-copy credential registry, swappable
transport-security backends behind one secure socket API, and a benchmark
harness.
"""

__version__ = "0.1.0"
