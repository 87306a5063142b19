"""Shareless router between dealer/client and the share servers.

Knows every server's address and x-coordinate, fans writes out to all n
servers, satisfies reads from the first t that respond, and relays
result-delivery requests. It forwards share strings opaquely and never
reconstructs anything.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import protocol
from .field import MERSENNE_61, is_prime
from .protocol import (
    Ack,
    ColumnSet,
    ColumnShares,
    CreateTable,
    FetchToClient,
    GetColumn,
    GetSchema,
    InsertBundle,
    InsertShares,
    Register,
    RemoteError,
    SchemaResult,
    ServerList,
    SsdbError,
    TaggedColumn,
    TcpService,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServerInfo:
    server_id: str
    x_coord: int
    address: str  # host:port


@dataclass(frozen=True)
class ClusterConfig:
    """(t, n) topology: modulus, threshold, and the server roster."""

    p: int
    n: int
    t: int
    servers: tuple[ServerInfo, ...]

    def __post_init__(self):
        if len(self.servers) != self.n:
            raise ValueError(f"n={self.n} but {len(self.servers)} servers configured")
        if not 1 <= self.t <= self.n:
            raise ValueError(f"need 1 <= t <= n, got t={self.t}, n={self.n}")
        if not is_prime(self.p):
            raise ValueError(f"modulus {self.p} is not prime")
        ids = [s.server_id for s in self.servers]
        xs = [s.x_coord for s in self.servers]
        addrs = [s.address for s in self.servers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate server ids")
        if len(set(xs)) != len(xs):
            raise ValueError("duplicate x-coordinates")
        if len(set(addrs)) != len(addrs):
            raise ValueError("duplicate server addresses")
        if any(not 1 <= x < self.p for x in xs):
            raise ValueError("x-coordinates must be in [1, p)")

    def server_by_id(self, server_id: str) -> ServerInfo:
        for info in self.servers:
            if info.server_id == server_id:
                return info
        raise KeyError(server_id)

    def to_json_dict(self) -> dict:
        return {
            "p": str(self.p),
            "n": self.n,
            "t": self.t,
            "servers": [
                {"server_id": s.server_id, "x_coord": s.x_coord, "address": s.address}
                for s in self.servers
            ],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ClusterConfig":
        try:
            servers = tuple(
                ServerInfo(s["server_id"], s["x_coord"], s["address"]) for s in obj["servers"]
            )
            return cls(p=int(obj["p"]), n=obj["n"], t=obj["t"], servers=servers)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed cluster config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ClusterConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n", encoding="utf-8")


class Hub:
    """Single-process router; holds addresses and liveness, never shares."""

    def __init__(
        self,
        config: ClusterConfig,
        listen: tuple[str, int] = ("127.0.0.1", 0),
        *,
        connect_timeout: float = 2.0,
        response_timeout: float = 5.0,
    ):
        self.config = config
        self.connect_timeout = connect_timeout
        self.response_timeout = response_timeout
        self.last_seen: dict[str, Optional[float]] = {s.server_id: None for s in config.servers}
        self._service = TcpService(listen[0], listen[1], self.handle, p=config.p, name="hub")
        self._lock = threading.Lock()

    def start(self) -> None:
        self._service.start()

    def stop(self) -> None:
        self._service.stop()

    @property
    def address(self) -> tuple[str, int]:
        return self._service.address

    @property
    def addr_str(self) -> str:
        return self._service.addr_str

    # --- server RPC --------------------------------------------------------

    def _ask(self, info: ServerInfo, msg):
        """One exchange with one server; updates liveness on the way."""
        reply = protocol.request(
            protocol.parse_addr(info.address),
            msg,
            p=self.config.p,
            connect_timeout=self.connect_timeout,
            response_timeout=self.response_timeout,
        )
        self.last_seen[info.server_id] = time.time()
        return reply

    # --- handlers -----------------------------------------------------------

    def handle(self, msg):
        if isinstance(msg, CreateTable):
            return self.broadcast(msg)
        if isinstance(msg, InsertBundle):
            return self.split_insert(msg)
        if isinstance(msg, GetColumn):
            return self.fetch_column_from_t(msg)
        if isinstance(msg, GetSchema):
            return self.fetch_schema(msg)
        if isinstance(msg, FetchToClient):
            return self.relay_fetch_to_client(msg)
        if isinstance(msg, Register):
            return self.register(msg)
        if isinstance(msg, ServerList):
            return self.server_list(msg)
        raise SsdbError(protocol.INTERNAL, f"{msg.type} is not handled by the hub")

    def broadcast(self, msg: CreateTable) -> Ack:
        """Write path: every server must acknowledge, no quorum writes."""
        for info in self.config.servers:
            try:
                self._ask(info, msg)
            except (OSError, SsdbError) as exc:
                raise self._write_failure(info, exc)
        return Ack()

    def split_insert(self, msg: InsertBundle) -> Ack:
        """Deliver each server only its own share values from the bundle."""
        bundle_ids = set(msg.per_server)
        config_ids = {s.server_id for s in self.config.servers}
        if bundle_ids != config_ids:
            unknown = sorted(bundle_ids - config_ids)
            missing = sorted(config_ids - bundle_ids)
            parts = []
            if unknown:
                parts.append(f"unknown server ids {unknown}")
            if missing:
                parts.append(f"missing server ids {missing}")
            raise SsdbError(protocol.SCHEMA_MISMATCH, f"bad insert bundle: {'; '.join(parts)}")
        for info in self.config.servers:
            cut = InsertShares(
                req_id=msg.req_id, table=msg.table, index=msg.index,
                cells=msg.per_server[info.server_id],
            )
            try:
                self._ask(info, cut)
            except (OSError, SsdbError) as exc:
                raise self._write_failure(info, exc)
        return Ack()

    def _write_failure(self, info: ServerInfo, exc: Exception) -> SsdbError:
        # abort on the first failure so at most the servers already
        # written diverge; there is no rollback message
        code = exc.code if isinstance(exc, SsdbError) else protocol.INTERNAL
        if isinstance(exc, OSError):
            self.last_seen[info.server_id] = None
        return SsdbError(code, f"write failed at server {info.server_id} ({info.address}): {exc}")

    def _collect_from_t(self, build_msg):
        """Ask servers in configured order until t have answered.

        Transport failures skip to the next server; an ERROR reply is a
        data-level answer and propagates immediately.
        """
        collected = []
        for info in self.config.servers:
            try:
                reply = self._ask(info, build_msg(info))
            except RemoteError:
                raise
            except OSError as exc:
                log.info("hub: server %s unreachable: %s", info.server_id, exc)
                self.last_seen[info.server_id] = None
                continue
            collected.append((info, reply))
            if len(collected) == self.config.t:
                return collected
        raise SsdbError(
            protocol.THRESHOLD_UNAVAILABLE,
            f"only {len(collected)} of {self.config.n} servers reachable, need {self.config.t}",
        )

    def fetch_column_from_t(self, msg: GetColumn) -> ColumnSet:
        collected = self._collect_from_t(
            lambda info: GetColumn(req_id=msg.req_id, table=msg.table, attr=msg.attr)
        )
        columns = []
        for info, reply in collected:
            if not isinstance(reply, ColumnShares):
                raise SsdbError(
                    protocol.INTERNAL,
                    f"server {info.server_id} sent {reply.type}, expected COLUMN_SHARES",
                )
            columns.append(
                TaggedColumn(server_x=info.x_coord, index_list=reply.index_list, cells=reply.cells)
            )
        first = columns[0].index_list
        for col, (info, _) in zip(columns[1:], collected[1:]):
            if col.index_list != first:
                raise SsdbError(
                    protocol.INTERNAL,
                    f"servers disagree on the index list of {msg.table!r}.{msg.attr!r}",
                )
        return ColumnSet(columns=columns)

    def fetch_schema(self, msg: GetSchema) -> SchemaResult:
        for info in self.config.servers:
            try:
                reply = self._ask(info, GetSchema(req_id=msg.req_id, table=msg.table))
            except RemoteError:
                raise
            except OSError:
                self.last_seen[info.server_id] = None
                continue
            if not isinstance(reply, SchemaResult):
                raise SsdbError(protocol.INTERNAL, f"unexpected reply {reply.type}")
            return reply
        raise SsdbError(protocol.THRESHOLD_UNAVAILABLE, "no server reachable for schema read")

    def relay_fetch_to_client(self, msg: FetchToClient) -> Ack:
        """Instruct t live servers to push the requested cells to the client."""
        self._collect_from_t(
            lambda info: FetchToClient(
                req_id=msg.req_id, table=msg.table, attr=msg.attr,
                indices=msg.indices, client_addr=msg.client_addr,
            )
        )
        return Ack()

    def register(self, msg: Register) -> Ack:
        try:
            info = self.config.server_by_id(msg.server_id)
        except KeyError:
            raise SsdbError(
                protocol.SCHEMA_MISMATCH, f"server id {msg.server_id!r} is not in the cluster"
            ) from None
        if info.x_coord != msg.x_coord:
            raise SsdbError(
                protocol.SCHEMA_MISMATCH,
                f"server {msg.server_id!r} registered x={msg.x_coord}, config says {info.x_coord}",
            )
        self.last_seen[msg.server_id] = time.time()
        return Ack()

    def server_list(self, msg: ServerList) -> ServerList:
        return ServerList(
            servers=[
                {
                    "server_id": s.server_id,
                    "x_coord": s.x_coord,
                    "address": s.address,
                    "last_seen": self.last_seen[s.server_id],
                }
                for s in self.config.servers
            ]
        )
