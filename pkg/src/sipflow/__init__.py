"""Block-structured SIP pressure-correction solver with a virtual-rank halo-exchange layer."""
