// SPDX-License-Identifier: Apache-2.0
//
// Read-only HTTP server for one relevance document: `GET /` serves the UI
// page, `GET /api/document` the document and `GET /api/health` a liveness
// probe.

#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "httplib.h"
#include "json.hpp"

namespace nmt {

/// Built-in page used when no UI bundle directory is given.
const std::string& default_inspector_page();

/// `static_dir`, when non-empty, must contain index.html and is also mounted
/// for the bundle's other assets.
std::unique_ptr<httplib::Server> make_inspector_server(const nlohmann::json& document,
                                                       const std::filesystem::path& static_dir = {});

}  // namespace nmt
