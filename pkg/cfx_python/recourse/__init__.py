from .util import logger  # noqa: F401
