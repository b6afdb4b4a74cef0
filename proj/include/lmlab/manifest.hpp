#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

namespace lmlab::manifest {

inline constexpr const char* kToolVersion = "lmlab 0.1.0";
inline constexpr const char* kFileName = "run_manifest.json";

// Provenance record written beside every artifact-producing command's
// outputs: what ran, with which config and seed, over which corpus bytes.
struct RunManifest {
    std::string command;
    std::uint64_t seed = 0;
    std::string corpus_hash;  // hex, empty when no corpus input
    std::string tool_version = kToolVersion;
    std::string timestamp;    // UTC, ISO 8601
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
};

std::string iso_timestamp_utc();
std::string hex_hash(std::uint64_t hash);

void write(const std::filesystem::path& directory, const RunManifest& manifest);
RunManifest read(const std::filesystem::path& file);

}  // namespace lmlab::manifest
