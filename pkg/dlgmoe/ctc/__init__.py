"""CTC loss and greedy decoding."""
