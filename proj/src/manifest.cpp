#include "lmlab/manifest.hpp"

#include <cstdio>
#include <ctime>

#include "lmlab/util.hpp"

namespace lmlab::manifest {

std::string iso_timestamp_utc() {
    std::time_t now = std::time(nullptr);
    std::tm utc{};
    gmtime_r(&now, &utc);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &utc);
    return buf;
}

std::string hex_hash(std::uint64_t hash) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
    return buf;
}

void write(const std::filesystem::path& directory, const RunManifest& manifest) {
    std::filesystem::create_directories(directory);
    nlohmann::ordered_json doc;
    doc["command"] = manifest.command;
    doc["seed"] = manifest.seed;
    doc["corpus_hash"] = manifest.corpus_hash;
    doc["tool_version"] = manifest.tool_version;
    doc["timestamp"] = manifest.timestamp.empty() ? iso_timestamp_utc() : manifest.timestamp;
    doc["config"] = manifest.config;
    util::atomic_write_file(directory / kFileName, doc.dump(2) + "\n");
}

RunManifest read(const std::filesystem::path& file) {
    auto doc = nlohmann::ordered_json::parse(util::read_text_file(file));
    RunManifest manifest;
    manifest.command = doc.at("command").get<std::string>();
    manifest.seed = doc.at("seed").get<std::uint64_t>();
    manifest.corpus_hash = doc.at("corpus_hash").get<std::string>();
    manifest.tool_version = doc.at("tool_version").get<std::string>();
    manifest.timestamp = doc.at("timestamp").get<std::string>();
    manifest.config = doc.at("config");
    return manifest;
}

}  // namespace lmlab::manifest
