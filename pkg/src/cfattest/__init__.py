"""Control-flow attestation: instrumented toy target, sealed ID channel, CFG verifier."""

__version__ = "0.1.0"
