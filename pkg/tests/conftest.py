import logging

logging.getLogger("numba").setLevel(logging.WARNING)
