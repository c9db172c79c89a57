"""Conformer-lite encoder with DLG-MoE layers, attention decoder, joint loss and accounting."""
