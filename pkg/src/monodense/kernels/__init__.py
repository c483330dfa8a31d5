"""Hot loops, each with a numba kernel and a numpy fallback."""
