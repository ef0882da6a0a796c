#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "shortcut/artifact.hpp"
#include "shortcut/bias_model.hpp"
#include "shortcut/config.hpp"
#include "shortcut/dataset.hpp"
#include "shortcut/mitigation.hpp"
#include "shortcut/model.hpp"
#include "shortcut/train.hpp"

namespace shortcut {

// runs/<name>/ layout shared by the CLI and the service.
struct ProjectPaths {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.ini"; }
  std::filesystem::path dataset() const { return root / "dataset"; }
  std::filesystem::path model(const std::string& name = "vanilla") const { return root / "models" / name; }
  std::filesystem::path cavs() const { return root / "cavs"; }
  std::filesystem::path annotations() const { return root / "annotations.jsonl"; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path reveal() const { return root / "reveal"; }
  std::filesystem::path scores() const { return root / "scores"; }
  std::filesystem::path localization() const { return root / "localization"; }
};

// Defaults, overlaid with <root>/config.ini when present.
Config project_config(const ProjectPaths& p);

SynthConfig synth_config(const Config& c);
ArtifactSpec artifact_spec(const Config& c);  // not yet resolved against data
Architecture model_architecture(const Config& c);
TrainConfig train_config(const Config& c);
SvmOptions svm_options(const Config& c);
MitigationConfig mitigation_config(const Config& c, MitigationMethod method);

// Resolved spec of an injected artifact. Throws std::invalid_argument.
ArtifactSpec dataset_artifact(const Dataset& d, const std::string& id);

// A model directory holds a checkpoint and, for projection edits, edit.json
// with the CAV, clean statistics and gate.
void save_edited(const EditedModel& m, const std::filesystem::path& dir,
                 const nlohmann::json& provenance = nlohmann::json::object());
EditedModel load_edited(const std::filesystem::path& dir);

}  // namespace shortcut
