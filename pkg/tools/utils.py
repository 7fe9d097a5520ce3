import logging
import os
import zlib

import numpy as np

logging.basicConfig(
    level=os.environ.get("IVOPE_LOG_LEVEL", "INFO").upper(),
    format="[%(levelname)s] %(message)s"
)

_logger = logging.getLogger("ivope")


def log(msg):
    _logger.info(msg)


def log_warning(msg):
    _logger.warning(msg)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """
    Independent generator for one named source of randomness.

    Every stochastic component (transitions, dataset sampling, splits, action
    draws, network init, minibatch order, search sampling) asks for its own
    stream, so changing how many draws one component makes never shifts
    another component's numbers. The stream key is the CRC32 of the name.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
