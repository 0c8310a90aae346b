#ifndef C3OWD_REPORT_HPP
#define C3OWD_REPORT_HPP

#include <map>
#include <string>

#include <json.hpp>

namespace c3owd {

inline constexpr const char* kArtifactVersion = "c3owd 0.1.0";

/// Embedded in every emitted report. Two runs with identical command, flags,
/// and seed produce identical numeric payloads; only the timestamps differ.
struct RunManifest {
    std::string command;
    std::map<std::string, std::string> flags;
    std::uint64_t seed = 0;
    std::string started_at;
    std::string finished_at;
    std::string version = kArtifactVersion;

    nlohmann::json to_json() const;
};

std::string iso_timestamp_now();

/// Resolves the effective seed: the C3_SEED environment variable overrides
/// the flag value when set.
std::uint64_t effective_seed(std::uint64_t flag_seed);

}  // namespace c3owd

#endif
