#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ckba/config.hpp"

namespace ckba::pipeline {

enum class Stage { synth, eigs, ensemble, train, uq, invert, report };

inline constexpr Stage kAllStages[] = {Stage::synth, Stage::eigs,   Stage::ensemble, Stage::train,
                                       Stage::uq,    Stage::invert, Stage::report};

std::string_view to_string(Stage stage);
Stage parse_stage(std::string_view name);
/// Stages whose artifacts `stage` reads.
std::vector<Stage> upstream_of(Stage stage);

/// Case directory name: "unconditional" for n_y = 0, else "cond_<n_y>".
std::string case_name(int n_y);
/// All basis cases of a config: 0 (unconditional) followed by the n_y list.
std::vector<int> case_list(const ExperimentConfig& config);

struct StageRecord {
    std::string config_hash;
    double wall_seconds = 0.0;
    /// Paths relative to the run directory, mapped to their SHA-256.
    std::map<std::string, std::string> artifacts;
    /// Forward-solver queries spent by this stage, by purpose.
    std::map<std::string, std::int64_t> queries;
    /// Fingerprints of the upstream stage records this stage consumed.
    std::map<std::string, std::string> upstream;

    nlohmann::json to_json() const;
    static StageRecord from_json(const nlohmann::json& j);
    /// Hash of the artifact table and config hash; changes whenever the
    /// stage is rerun with different inputs or outputs.
    std::string fingerprint() const;
};

struct RunManifest {
    std::string tool_version;
    std::string config_hash;
    std::map<std::string, StageRecord> stages;

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

/// Run directory with its manifest.json. Stage writes go through here so
/// that each artifact is checksummed and recorded.
class Workspace {
public:
    Workspace(std::filesystem::path root, const ExperimentConfig& config);

    const std::filesystem::path& root() const noexcept { return root_; }
    const ExperimentConfig& config() const noexcept { return config_; }
    const RunManifest& manifest() const noexcept { return manifest_; }

    /// Throws ValidationError naming the stage and the problem when an
    /// upstream stage is missing, was produced by another config, has a
    /// missing or modified artifact, or was itself rerun after `stage`
    /// recorded it.
    void require(Stage stage, Stage upstream) const;
    /// Checks every artifact of a stage against its recorded checksum.
    void verify(Stage stage) const;
    void commit(Stage stage, StageRecord record);

    std::filesystem::path path(const std::string& relative) const { return root_ / relative; }

private:
    void save() const;

    std::filesystem::path root_;
    ExperimentConfig config_;
    std::string config_hash_;
    RunManifest manifest_;
};

/// Progress messages; silent when unset.
using Logger = std::function<void(const std::string&)>;

/// Runs one stage into `root` and records it in the manifest.
void run_stage(const ExperimentConfig& config, Stage stage, const std::filesystem::path& root,
               const Logger& log = {});
/// All stages in order.
void run_all(const ExperimentConfig& config, const std::filesystem::path& root, const Logger& log = {});

/// Report CSV file names, in emission order.
std::vector<std::string> report_files(const std::filesystem::path& root);

}  // namespace ckba::pipeline
