#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "deltascope/errors.hpp"
#include "deltascope/losses.hpp"
#include "deltascope/models.hpp"

namespace deltascope {

inline constexpr const char* kToolVersion = "0.1.0";

/// Process exit status for a failure category: 2 usage, 3 data, 4 numerical.
int exit_code(ErrorCategory category);

/// "EF-bce", "Siam-wbced", "EF-CNN", ... Unknown names throw UsageError
/// listing the valid ones.
std::pair<ModelKind, LossKind> parse_architecture_name(const std::string& name);
const std::vector<std::string>& architecture_names();

/// 16 hex digits of FNV-1a over a file's bytes.
std::string file_hash(const std::filesystem::path& path);

/// Record of one invocation: command, options, seed, hashed inputs and the
/// outputs written. Holds no timestamps, so reruns reproduce it exactly.
struct RunManifest {
    std::string command;
    nlohmann::json config = nlohmann::json::object();
    std::uint64_t seed = 0;
    std::vector<std::filesystem::path> inputs;
    std::vector<std::filesystem::path> outputs;

    nlohmann::json to_json() const;
    void write(const std::filesystem::path& path) const;
};

/// Entry point behind the `deltascope` executable. Returns the exit status;
/// diagnostics go to `err`, short progress lines to `out`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace deltascope
