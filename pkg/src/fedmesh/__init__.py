"""fedmesh: federated NER training over a small, fully deterministic network.

A star-topology federation (one coordinator, N sites) for token tagging,
with weighted/robust aggregation, client-side privacy filters, pairwise-mask
secure summation, signed messages, a hash-chained audit log, and two
interchangeable transports: a seeded in-process simulator and plain TCP.
"""

__version__ = "0.1.0"
