"""casa-mini: a desk-scale interactive analysis facility.

Columnar event analysis fans out from a per-user scheduler to elastically
provisioned workers behind an SNI-multiplexed TLS ingress, with per-user
minted credentials and a token-authenticated caching data proxy.  A
virtual-clock benchmark harness reproduces the worker-scaling study.
"""

__version__ = "0.1.0"
