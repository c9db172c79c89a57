"""Dynamic language groups: dispatch, gated top-k experts, combine."""
