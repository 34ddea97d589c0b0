import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


class MockAgent:
    """Scripted HTTP agent: ``responder(prompt) -> body`` or an int status to fail with."""

    def __init__(self):
        self.prompts: list[str] = []
        self.responder = lambda prompt: '{"order_quantity": 4}'

    def handler(self):
        agent = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                prompt = self.rfile.read(n).decode()
                agent.prompts.append(prompt)
                body = agent.responder(prompt)
                if isinstance(body, int):
                    self.send_response(body)
                    self.end_headers()
                    return
                data = body.encode()
                self.send_response(200)
                self.send_header("Content-Type", "text/plain")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        return Handler


@pytest.fixture
def mock_agent():
    agent = MockAgent()
    server = ThreadingHTTPServer(("127.0.0.1", 0), agent.handler())
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    agent.url = f"http://127.0.0.1:{server.server_address[1]}/"
    yield agent
    server.shutdown()
    server.server_close()


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
