"""Federated hierarchical 3D indoor localization from WiFi RSSI fingerprints.

Library + CLI for simulating hierarchical multitask positioning models
(building / floor / 2D coordinates) trained centrally or with federated
averaging over virtual clients, with a link-budget model for the
communication cost of each round.
"""

__version__ = "0.1.0"
