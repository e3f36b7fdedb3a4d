import argparse
import logging
import os

from dotenv import dotenv_values, load_dotenv

from errors import UsageError

logger = logging.getLogger(__name__)

load_dotenv()


class Config:
    # Logging
    LOG_LEVEL = os.environ.get('SALIENCY_LOG_LEVEL', 'INFO')

    # Parallelism; 1 forces bitwise determinism
    THREADS = int(os.environ.get('SALIENCY_THREADS', os.cpu_count() or 1))

    # Model / training defaults
    SEED = int(os.environ.get('SALIENCY_SEED', '0'))
    CHANNEL_SCALE = float(os.environ.get('SALIENCY_CHANNEL_SCALE', '1.0'))
    TRAIN_SIZE = int(os.environ.get('SALIENCY_TRAIN_SIZE', '224'))


# Settings that only make sense on the command line
_NOT_FROM_FILE = {'config', 'command', 'handler', 'help'}
_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


def load_config_file(path):
    """Flat ``key=value`` lines with ``#`` comments; keys are flag names with ``_``."""
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    values = dotenv_values(path)
    return {key.strip().replace('-', '_'): value for key, value in values.items()}


def _is_switch(action):
    return isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction,
                               argparse.BooleanOptionalAction))


def _parse_switch(key, value):
    text = (value or '').strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise UsageError(f"config key {key}: expected a boolean, got {value!r}")


def apply_config_file(parser, values):
    """Install file values as the parser's defaults so flags still win.

    String defaults go through each argument's ``type`` when argparse parses,
    so file values are converted like command-line values.
    """
    actions = {action.dest: action for action in parser._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in _NOT_FROM_FILE:
            raise UsageError(f"unknown config key: {key}")
        if _is_switch(action):
            defaults[key] = _parse_switch(key, value)
        elif action.nargs in ('*', '+'):
            defaults[key] = [item.strip() for item in (value or '').split(',') if item.strip()]
        else:
            defaults[key] = value
    parser.set_defaults(**defaults)
    return defaults


def effective_settings(args):
    return {key: value for key, value in sorted(vars(args).items()) if key not in ('handler',)}


def log_effective_settings(args):
    for key, value in effective_settings(args).items():
        logger.info("config %s=%s", key, value)
