import logging

from config import get_config

logger = logging.getLogger("again_vc")
logger.setLevel(get_config().LOG_LEVEL.upper())

console_handler = logging.StreamHandler()
console_handler.setLevel(logging.DEBUG)
console_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))

if not logger.handlers:
    logger.addHandler(console_handler)

logging.getLogger("numba").setLevel(logging.WARNING)
logging.getLogger("matplotlib").setLevel(logging.WARNING)
