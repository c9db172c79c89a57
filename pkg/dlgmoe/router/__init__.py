"""Weight-shared language router: LID/ASR heads, inter-loss and routing tables."""
