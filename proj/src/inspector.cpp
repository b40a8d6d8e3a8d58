// SPDX-License-Identifier: Apache-2.0

#include "nmt/inspector.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nmt {

const std::string& default_inspector_page() {
  static const std::string page = R"html(<!doctype html>
<html>
<head>
<meta charset="utf-8">
<title>Relevance inspector</title>
<style>
body { font-family: sans-serif; margin: 1em; }
.layer { display: flex; gap: 4px; margin: 4px 0; overflow-x: auto; }
.layer b { width: 7em; flex: none; }
button.sel { background: #246; color: #fff; }
.bar { background: #48c; height: 1em; display: inline-block; vertical-align: middle; }
#error { color: #b00; }
</style>
</head>
<body>
<div id="error"></div>
<div id="net"></div>
<div id="panel"></div>
<script>
fetch('/api/document').then(r => r.json()).then(doc => {
  const net = document.getElementById('net');
  const panel = document.getElementById('panel');
  for (const layer of doc.layers) {
    const row = document.createElement('div');
    row.className = 'layer';
    row.innerHTML = '<b>' + layer + '</b>';
    for (const node of doc.nodes.filter(n => n.layer === layer)) {
      const b = document.createElement('button');
      b.textContent = node.id;
      b.onclick = () => {
        document.querySelectorAll('button.sel').forEach(x => x.classList.remove('sel'));
        b.classList.add('sel');
        const words = node.relevance.src.map((v, i) => [doc.src[i], v])
          .concat(node.relevance.tgt_prefix.map((v, i) => [doc.tgt[i], v]))
          .sort((a, c) => c[1] - a[1]);
        panel.innerHTML = words.map(([w, v]) =>
          '<div>' + w + ' <span class="bar" style="width:' + Math.max(0, v * 300) + 'px"></span> ' +
          v.toFixed(3) + '</div>').join('');
      };
      row.appendChild(b);
    }
    net.appendChild(row);
  }
}).catch(e => { document.getElementById('error').textContent = String(e); });
</script>
</body>
</html>
)html";
  return page;
}

std::unique_ptr<httplib::Server> make_inspector_server(const nlohmann::json& document,
                                                       const std::filesystem::path& static_dir) {
  auto server = std::make_unique<httplib::Server>();
  std::string index = default_inspector_page();
  if (!static_dir.empty()) {
    std::ifstream in(static_dir / "index.html");
    if (!in) throw std::runtime_error("inspector: no index.html in " + static_dir.string());
    std::stringstream buf;
    buf << in.rdbuf();
    index = buf.str();
    server->set_mount_point("/", static_dir.string());
  }
  const std::string body = document.dump();
  server->Get("/", [index](const httplib::Request&, httplib::Response& res) {
    res.set_content(index, "text/html; charset=utf-8");
  });
  server->Get("/api/document", [body](const httplib::Request&, httplib::Response& res) {
    res.set_content(body, "application/json");
  });
  server->Get("/api/health", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"ok":true})", "application/json");
  });
  return server;
}

}  // namespace nmt
