"""Shared test configuration.

TINY_NET keeps network-shaped tests fast; the default sizes from the
experiments are exercised separately where the contract pins them.
"""

TINY_NET = dict(k=1, width=8, demb=4, sin_dim=4, groups=2)
