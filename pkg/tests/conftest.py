"""Local HTTP server standing in for the remote bar endpoint."""

import http.server
import threading

import pytest

FIXTURE = {
    "AAA": "Date,Open,High,Low,Close,Adj Close,Volume\n"
           "2020-01-02,10.0,11.0,9.5,10.5,10.5,1000\n"
           "2020-01-03,10.5,11.5,10.0,11.0,11.0,1100\n"
           "2020-01-06,11.0,11.2,10.1,10.2,10.2,900\n",
    "BBB": "Date,Open,High,Low,Close,Adj Close,Volume\n"
           "2020-01-02,20.0,21.0,19.0,20.5,20.5,500\n"
           "2020-01-03,20.5,22.0,20.0,21.5,21.5,600\n",
}


class _Handler(http.server.BaseHTTPRequestHandler):
    calls = 0

    def do_GET(self):
        type(self).calls += 1
        ticker = self.path.split("/")[-1].split("?")[0]
        if ticker == "BAD":
            self.send_response(200)
            self.end_headers()
            self.wfile.write(b"Date,Open,High,Low,Close,Volume\n2020-01-02,abc,1,1,1,1\n")
            return
        if ticker not in FIXTURE:
            self.send_response(503)
            self.end_headers()
            return
        self.send_response(200)
        self.send_header("Content-Type", "text/csv")
        self.end_headers()
        self.wfile.write(FIXTURE[ticker].encode())

    def log_message(self, *args):
        pass


@pytest.fixture()
def server():
    _Handler.calls = 0
    srv = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{srv.server_port}/{{ticker}}", _Handler
    srv.shutdown()




ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_LINES, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
