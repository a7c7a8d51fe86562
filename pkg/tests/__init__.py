"""
Test suite for w2vj.

Unit tests per module, finite-difference and enumeration oracles, and the
end-to-end overfit runs (marked ``slow``).
"""
