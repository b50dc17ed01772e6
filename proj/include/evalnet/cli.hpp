#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace evalnet {

// Run record written beside every artifact-producing command's output:
// <out>.manifest.json for file outputs, run_manifest.json inside
// directory outputs. Manifests are exempt from the byte-idempotence rule
// because they carry a timestamp.
struct RunManifest {
    std::string command;
    std::string config_path;
    std::string config_sha256;
    std::uint64_t seed = 0;
    bool has_seed = false;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    nlohmann::json extra = nlohmann::json::object();

    nlohmann::json to_json() const;
};

void write_run_manifest(const RunManifest& m, const std::string& out_target);

// Git-style blob hash of a config payload: sha256 over
// "blob <size>\0" + bytes.
std::string config_blob_hash(const std::string& bytes);

// Full command-line surface; returns the process exit code.
//   0 success, 1 usage error, 2 data error, 3 numeric failure.
int run_cli(int argc, const char* const* argv);
// Convenience overload for tests; args exclude the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace evalnet
