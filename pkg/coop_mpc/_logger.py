import logging

logger = logging.getLogger("coop-mpc")
