#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scmbias/errors.hpp"
#include "scmbias/hash.hpp"
#include "scmbias/version.hpp"

namespace scmbias {

// Provenance record written next to every artifact a command produces.
// The manifest id hashes everything except the timestamp, so artifacts stay
// byte-identical across reruns with equal inputs, configs and seeds.
struct RunManifest {
    std::string command;
    std::string config_hash;
    std::map<std::string, std::uint64_t> seeds;
    std::map<std::string, std::string> input_digests;  // path -> digest
    std::vector<std::string> outputs;
    std::string tool_version = kVersion;
    std::string timestamp_utc;

    nlohmann::json to_json(bool with_timestamp = true) const {
        nlohmann::json j{{"command", command},
                         {"config_hash", config_hash},
                         {"seeds", seeds},
                         {"input_digests", input_digests},
                         {"outputs", outputs},
                         {"tool_version", tool_version}};
        if (with_timestamp) j["timestamp_utc"] = timestamp_utc;
        return j;
    }

    std::string id() const { return digest_hex(to_json(false).dump()); }
};

inline std::string utc_now_iso8601() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

inline std::string file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("digest: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return digest_hex(buf.str());
}

inline void write_manifest(const RunManifest& manifest, const std::string& path) {
    nlohmann::json j = manifest.to_json();
    j["manifest_id"] = manifest.id();
    std::ofstream out(path);
    if (!out) throw DataError("manifest: cannot write '" + path + "'");
    out << j.dump(2) << "\n";
}

}  // namespace scmbias
