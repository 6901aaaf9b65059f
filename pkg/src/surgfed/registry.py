"""Class registry: which client annotates which global class.

Classes are identified by name once, at construction; every other function
in the package works with integer indices into ``global_classes``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass(frozen=True)
class ClassRegistry:
    """Global class list plus the per-client subsets of it.

    ``client_classes[k]`` holds the sorted global indices of the classes
    client ``k`` has labels for.  Every client must hold at least one class
    and the union over clients must cover every global class.
    """

    global_classes: tuple[str, ...]
    client_classes: tuple[tuple[int, ...], ...]

    def __init__(self, global_classes, client_classes):
        names = tuple(str(n) for n in global_classes)
        if len(names) == 0:
            raise ConfigError("registry needs at least one global class")
        if len(set(names)) != len(names):
            raise ConfigError("duplicate global class names")
        clients = []
        for k, cs in enumerate(client_classes):
            cs = tuple(int(c) for c in cs)
            if len(cs) == 0:
                raise ConfigError(f"client {k} has an empty class list")
            if len(set(cs)) != len(cs):
                raise ConfigError(f"client {k} lists a class twice")
            for c in cs:
                if not 0 <= c < len(names):
                    raise ConfigError(f"client {k} references unknown class index {c}")
            clients.append(tuple(sorted(cs)))
        if len(clients) == 0:
            raise ConfigError("registry needs at least one client")
        covered = set()
        for cs in clients:
            covered.update(cs)
        if covered != set(range(len(names))):
            missing = sorted(set(range(len(names))) - covered)
            raise ConfigError(f"classes {missing} are held by no client")
        object.__setattr__(self, "global_classes", names)
        object.__setattr__(self, "client_classes", tuple(clients))

    @property
    def n_classes(self) -> int:
        return len(self.global_classes)

    @property
    def n_clients(self) -> int:
        return len(self.client_classes)


@dataclass(frozen=True)
class SharingProfile:
    """Partition of the global classes by how widely they are annotated.

    ``shared_by_all`` are classes every client holds, ``unique`` classes
    exactly one client holds (when there is more than one client), and
    ``partially_shared`` everything in between.
    """

    shared_by_all: tuple[int, ...]
    partially_shared: tuple[int, ...]
    unique: tuple[int, ...]


def clients_with_class(registry: ClassRegistry, c: int) -> tuple[int, ...]:
    """Ascending ids of the clients that hold global class ``c``."""
    if not 0 <= c < registry.n_classes:
        raise ConfigError(f"class index {c} out of range")
    return tuple(k for k, cs in enumerate(registry.client_classes) if c in cs)


def local_to_global(registry: ClassRegistry, k: int, j: int) -> int:
    """Global index of client ``k``'s ``j``-th local class."""
    _check_client(registry, k)
    cs = registry.client_classes[k]
    if not 0 <= j < len(cs):
        raise ConfigError(f"client {k} has no local class {j}")
    return cs[j]


def global_to_local(registry: ClassRegistry, k: int, c: int) -> int | None:
    """Local column of global class ``c`` at client ``k``, None if absent."""
    _check_client(registry, k)
    if not 0 <= c < registry.n_classes:
        raise ConfigError(f"class index {c} out of range")
    cs = registry.client_classes[k]
    try:
        return cs.index(c)
    except ValueError:
        return None


def sharing_profile(registry: ClassRegistry) -> SharingProfile:
    """Split the global classes into shared-by-all / partial / unique."""
    K = registry.n_clients
    shared, partial, unique = [], [], []
    for c in range(registry.n_classes):
        kc = len(clients_with_class(registry, c))
        if kc == K:
            shared.append(c)
        elif kc == 1:
            unique.append(c)
        else:
            partial.append(c)
    return SharingProfile(tuple(shared), tuple(partial), tuple(unique))


def _check_client(registry: ClassRegistry, k: int) -> None:
    if not 0 <= k < registry.n_clients:
        raise ConfigError(f"client index {k} out of range")
