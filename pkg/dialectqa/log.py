"""Logging helpers shared by the library and the command line"""
import functools
import logging
import sys

LOG_FORMAT = '%(asctime)s %(name)s %(levelname)s %(message)s'

_logger = logging.getLogger('dialectqa')


def init_logging(loglevel=logging.INFO):
    """Configure the root handler, repeated calls only adjust the level"""
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=loglevel, format=LOG_FORMAT)
    root.setLevel(loglevel)


def log_exceptions(func=None, re_raise=True):
    """Decorator to log exceptions that are easy to lose in worker threads"""
    if func is None:
        return functools.partial(log_exceptions, re_raise=re_raise)

    @functools.wraps(func)
    def wrapped(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except Exception as exc:  # pylint: disable=W0703
            logging.getLogger(func.__module__).exception(exc)
            if re_raise:
                raise
            return None
    return wrapped


def error(msg, exception=None, data=None):
    """Log an error, with the traceback of `exception` and the `data` payload if given"""
    if exception is not None:
        _logger.error(msg, exc_info=(type(exception), exception, exception.__traceback__))
    else:
        _logger.error(msg)
    if data is not None:
        _logger.error('data: {}'.format(data))


def exception_handler(exctype, exception, tb):  # pylint: disable=W0613
    error('{}: {}'.format(exctype.__name__, exception), exception)


def install_excepthook():
    """Route uncaught exceptions through `error`"""
    sys.excepthook = exception_handler
