"""fedmerge: a deterministic federated-learning simulator.

Implements SCAFFOLD-style rounds with control variates, plus a
correlation-based node-merging step that fuses similar clients into
intermediary nodes, under simulated packet loss, network delay and
label-flip poisoning.
"""

__version__ = "0.1.0"
