"""Training, evaluation, accounting reports and routing visualisation."""
