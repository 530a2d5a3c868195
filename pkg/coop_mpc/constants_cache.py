from abc import ABC, abstractmethod
from collections import OrderedDict
from typing import Dict, Hashable, Tuple

import diskcache

from ._logger import logger

ConstantsKey = Tuple[Hashable, ...]
ConstantsValue = Dict[str, float]


class BaseConstantsCache(ABC):
    """Base cache for estimated monitor constants."""

    def __init__(self, capacity: int = 1024):
        self.capacity = capacity

    @property
    @abstractmethod
    def cache_size(self) -> int:
        raise NotImplementedError

    @abstractmethod
    def __getitem__(self, key: ConstantsKey) -> ConstantsValue:
        raise NotImplementedError

    @abstractmethod
    def __contains__(self, key: ConstantsKey) -> bool:
        raise NotImplementedError

    @abstractmethod
    def __setitem__(self, key: ConstantsKey, value: ConstantsValue) -> None:
        raise NotImplementedError


class ConstantsRAMCache(BaseConstantsCache):
    """Cache for monitor constants kept in memory, least recently used first out."""

    def __init__(self, capacity: int = 1024):
        super().__init__(capacity)
        self.entries: "OrderedDict[ConstantsKey, ConstantsValue]" = OrderedDict()

    @property
    def cache_size(self):
        return len(self.entries)

    def __getitem__(self, key: ConstantsKey) -> ConstantsValue:
        value = self.entries[key]
        self.entries.move_to_end(key)
        return dict(value)

    def __contains__(self, key: ConstantsKey) -> bool:
        return key in self.entries

    def __setitem__(self, key: ConstantsKey, value: ConstantsValue):
        if key in self.entries:
            del self.entries[key]
        self.entries[key] = dict(value)
        while len(self.entries) > self.capacity:
            self.entries.popitem(last=False)


class ConstantsDiskCache(BaseConstantsCache):
    """Cache for monitor constants on disk, shared between runs."""

    def __init__(self, cache_dir: str = ".cache/coop_mpc_constants", capacity: int = 1024):
        super().__init__(capacity)
        self.cache = diskcache.Cache(cache_dir)

    @property
    def cache_size(self):
        return len(self.cache)

    def __getitem__(self, key: ConstantsKey) -> ConstantsValue:
        value = self.cache[key]
        return dict(value)  # type: ignore

    def __contains__(self, key: ConstantsKey) -> bool:
        return key in self.cache

    def __setitem__(self, key: ConstantsKey, value: ConstantsValue):
        logger.debug("ConstantsDiskCache.__setitem__: %s", key)
        self.cache[key] = dict(value)
        while len(self.cache) > self.capacity:
            self.cache.cull()
            if len(self.cache) > self.capacity:
                oldest = next(iter(self.cache))
                del self.cache[oldest]
