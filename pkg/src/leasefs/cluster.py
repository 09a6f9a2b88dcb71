"""Wiring helpers: assemble a full stack in one process over loopback, or
dial externally served manager/storage endpoints over TCP.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .client import ClientNode, NodeConfig
from .core import PAGE_SIZE, CacheMode, Gfi
from .locks import DeadlockRegistry, LockOrderTracker
from .manager import LeaseManager, RpcRevokeSender
from .storage import StorageNode, StorageRouter
from .transport import LoopbackListener, RpcClient, RpcServer, tcp_dial


@dataclass
class ClusterConfig:
    nodes: int = 2
    storage_nodes: int = 1
    mode: CacheMode = CacheMode.WRITE_BACK_LEASE
    data_dir: Optional[Path] = None  # None runs storage fully in memory
    node: NodeConfig = field(default_factory=NodeConfig)
    revoke_timeout_s: float = 30.0
    retry_limit: int = 3
    retry_backoff_s: float = 0.1


def _clone_node_config(base: NodeConfig) -> NodeConfig:
    # Each node gets its own config object so per-node mutation in tests
    # cannot alias another node's daemon.
    return NodeConfig(
        daemon=replace(base.daemon),
        flush_interval_s=base.flush_interval_s,
        auto_flush=base.auto_flush,
        occ_retry_cap=base.occ_retry_cap,
    )


class LocalCluster:
    """Manager, storage nodes, and client nodes in one process.

    Every hop still crosses the wire codec through loopback pipes, so the
    protocol behaves exactly as over TCP minus latency and loss.
    """

    def __init__(self, config: Optional[ClusterConfig] = None,
                 tracker: Optional[LockOrderTracker] = None,
                 registry: Optional[DeadlockRegistry] = None,
                 recorder=None) -> None:
        self.config = config or ClusterConfig()
        cfg = self.config
        self._servers: list[RpcServer] = []
        self._routers: list[StorageRouter] = []
        self._rpc_clients: list[RpcClient] = []

        self.storage_nodes: list[StorageNode] = []
        storage_listeners: list[LoopbackListener] = []
        for sid in range(cfg.storage_nodes):
            data_dir = None
            if cfg.data_dir is not None:
                data_dir = Path(cfg.data_dir) / f"storage{sid}"
            snode = StorageNode(sid, data_dir)
            listener = LoopbackListener(f"storage{sid}")
            self._servers.append(RpcServer(listener, snode.handle, f"storage{sid}"))
            storage_listeners.append(listener)
            self.storage_nodes.append(snode)

        def new_router() -> StorageRouter:
            router = StorageRouter(
                [RpcClient(listener.connect) for listener in storage_listeners]
            )
            self._routers.append(router)
            return router

        self._revoke_sender = RpcRevokeSender(timeout=cfg.revoke_timeout_s)
        self.manager = LeaseManager(
            self._revoke_sender,
            retry_limit=cfg.retry_limit,
            retry_backoff_s=cfg.retry_backoff_s,
        )
        self.manager_listener = LoopbackListener("manager")
        self._servers.append(
            RpcServer(self.manager_listener, self.manager.handle, "manager")
        )

        self.nodes: list[ClientNode] = []
        for nid in range(cfg.nodes):
            manager_client = RpcClient(self.manager_listener.connect)
            self._rpc_clients.append(manager_client)
            node = ClientNode(
                nid, cfg.mode, manager_client, new_router(),
                config=_clone_node_config(cfg.node),
                tracker=tracker, registry=registry, recorder=recorder,
            )
            revoke_listener = LoopbackListener(f"node{nid}-revoke")
            self._servers.append(
                RpcServer(revoke_listener, node.daemon.handle_revoke_frame,
                          f"node{nid}-revoke")
            )
            revoke_client = RpcClient(revoke_listener.connect)
            self._rpc_clients.append(revoke_client)
            self._revoke_sender.register(nid, revoke_client)
            self.nodes.append(node)

        # Direct storage access for setup and for oracle-style verification.
        self.storage = new_router()

    # -- helpers -------------------------------------------------------------

    def client(self, index: int) -> ClientNode:
        return self.nodes[index]

    def create_file(self, path: str, pages: int = 0) -> Gfi:
        gfi = self.storage.create(path)
        if pages:
            zero = bytes(PAGE_SIZE)
            self.storage.write_pages(gfi, [(i, zero) for i in range(pages)])
        return gfi

    def grant_log_text(self) -> str:
        return self.manager.dump_grant_log()

    def close(self) -> None:
        for node in self.nodes:
            node.close()
        for server in self._servers:
            server.close()
        for client in self._rpc_clients:
            client.close()
        self._revoke_sender.close()
        for router in self._routers:
            router.close()
        for snode in self.storage_nodes:
            snode.close()

    def __enter__(self) -> "LocalCluster":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def tcp_client_node(node_id: int, mode: CacheMode,
                    manager_endpoint: str, storage_endpoints: list[str],
                    config: Optional[NodeConfig] = None) -> ClientNode:
    """Build one client node against externally served endpoints."""
    from .transport import parse_endpoint

    mhost, mport = parse_endpoint(manager_endpoint)
    manager_client = RpcClient(tcp_dial(mhost, mport))
    storage_clients = []
    for ep in storage_endpoints:
        shost, sport = parse_endpoint(ep)
        storage_clients.append(RpcClient(tcp_dial(shost, sport)))
    router = StorageRouter(storage_clients)
    return ClientNode(node_id, mode, manager_client, router,
                      config=config or NodeConfig())
