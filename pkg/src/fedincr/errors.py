"""Exception hierarchy.

Every error carries an ``exit_code`` family used by the command line:
1 usage, 2 I/O, 3 protocol, 4 validation.
"""

from __future__ import annotations


class FedIncrError(Exception):
    exit_code = 4


# nn-core
class DescriptorError(FedIncrError):
    pass


class ShapeError(FedIncrError):
    pass


class EmptyInputError(FedIncrError):
    pass


class NumericError(FedIncrError):
    pass


class CacheError(FedIncrError):
    pass


# model packages
class PackageError(FedIncrError):
    pass


class FormatError(PackageError):
    pass


class HashMismatch(PackageError):
    pass


class ArchMismatch(PackageError):
    pass


# segmentation engine / geometry
class GeometryError(FedIncrError):
    pass


class InsufficientSlices(FedIncrError):
    pass


class TopologyError(FedIncrError):
    pass


class DegenerateRegion(FedIncrError):
    pass


# server / protocol
class ProtocolError(FedIncrError):
    exit_code = 3


class Conflict(ProtocolError):
    pass


class Unauthorized(ProtocolError):
    pass


class NotFound(ProtocolError):
    pass


class TransportError(ProtocolError):
    pass


class StatsDropped(ProtocolError):
    pass


class ValidationError(FedIncrError):
    pass


class InvalidRecord(FedIncrError):
    pass


# simulation / analysis
class PackingError(FedIncrError):
    pass


class PretrainError(FedIncrError):
    pass


class FitError(FedIncrError):
    pass


class ConfigError(FedIncrError):
    exit_code = 1
