from gridflow.server.app import Engine, ServerThread, create_app, serve
from gridflow.server.config import ServerConfig
from gridflow.server.store import AdminRule, EngineStore

__all__ = ["AdminRule", "Engine", "EngineStore", "ServerConfig", "ServerThread", "create_app", "serve"]
