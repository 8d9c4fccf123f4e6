from .channels import ChannelStats, InMemoryNetwork, LinkStats, TcpEndpoint, tcp_endpoints
from .session import RunResult, SessionConfig, execute_plan, run_inmemory, run_tcp_local, session_parties

__all__ = ["ChannelStats", "InMemoryNetwork", "LinkStats", "TcpEndpoint", "tcp_endpoints", "RunResult",
           "SessionConfig", "execute_plan", "run_inmemory", "run_tcp_local", "session_parties"]
