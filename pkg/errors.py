# -*- coding: utf-8 -*-
"""
Expression spotting engine - error types

Every failure the command line can report maps onto one of these classes;
`exit_code` is what `mcwes` returns to the shell.
"""


class MCWESError(Exception):
    exit_code = 1


class ConfigError(MCWESError):
    """Invalid configuration value, unknown key or impossible setting"""
    exit_code = 2


class DataError(MCWESError):
    """Malformed manifest, feature file or checkpoint"""
    exit_code = 3


class ShapeError(MCWESError, ValueError):
    """Tensor dimensions do not agree"""


class ArgumentError(MCWESError, ValueError):
    """Argument outside the range an operation accepts"""


class TrainingAborted(MCWESError):
    """Non-finite gradient reached the optimizer"""
