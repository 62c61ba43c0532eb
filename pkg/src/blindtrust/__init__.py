"""Oblivious remote attestation for virtual functions, over a virtual TPM."""

__version__ = "0.1.0"
