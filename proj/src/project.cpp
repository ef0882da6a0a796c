#include "shortcut/project.hpp"

#include <fstream>
#include <stdexcept>

namespace shortcut {

using nlohmann::json;

Config project_config(const ProjectPaths& p) {
  Config c;
  if (std::filesystem::exists(p.config())) c.merge_file(p.config());
  return c;
}

SynthConfig synth_config(const Config& c) {
  SynthConfig s;
  s.modality = parse_modality(c.get("dataset.modality"));
  s.num_classes = c.get_size("dataset.classes");
  s.samples_per_class = c.get_size("dataset.per_class");
  s.shape = c.get_shape("dataset.shape");
  s.noise = c.get_double("dataset.noise");
  s.seed = c.get_u64("dataset.seed");
  return s;
}

ArtifactSpec artifact_spec(const Config& c) {
  ArtifactSpec a;
  a.id = c.get("artifact.id");
  a.kind = parse_artifact_kind(c.get("artifact.kind"));
  a.rate = c.get_double("artifact.rate");
  a.target_class = c.get_size("artifact.target_class");
  a.patch_h = a.patch_w = c.get_size("artifact.patch_size");
  a.channel = c.get_size("artifact.channel");
  a.window_start = c.get_double("artifact.window_start");
  a.window_length = c.get_double("artifact.window_length");
  a.amplitude = c.get_double("artifact.amplitude");
  return a;
}

Architecture model_architecture(const Config& c) { return parse_architecture(c.get("model.arch")); }

TrainConfig train_config(const Config& c) {
  TrainConfig t;
  t.epochs = c.get_size("model.epochs");
  t.learning_rate = c.get_double("model.lr");
  t.batch_size = c.get_size("model.batch_size");
  t.seed = c.get_u64("model.seed");
  return t;
}

SvmOptions svm_options(const Config& c) {
  SvmOptions o;
  o.lambda = c.get_double("cav.lambda");
  o.iterations = c.get_size("cav.iterations");
  return o;
}

MitigationConfig mitigation_config(const Config& c, MitigationMethod method) {
  MitigationConfig m;
  m.method = method;
  m.lambda_grid = c.get_doubles("mitigation.lambda_grid");
  m.target_class = c.get_optional_size("mitigation.target_class");
  m.mask_source = parse_mask_source(c.get("mitigation.mask_source"));
  m.epochs = c.get_size("mitigation.epochs");
  m.learning_rate = c.get_double("mitigation.lr");
  m.batch_size = c.get_size("mitigation.batch_size");
  m.seed = c.get_u64("mitigation.seed");
  m.gate = c.get_optional_double("mitigation.gate");
  m.per_location = c.get_bool("mitigation.per_location");
  m.latent_output = parse_latent_output(c.get("mitigation.latent_output"));
  m.max_grad_norm = c.get_double("mitigation.max_grad_norm");
  m.max_clean_drop = c.get_double("mitigation.max_clean_drop");
  return m;
}

ArtifactSpec dataset_artifact(const Dataset& d, const std::string& id) {
  const json* j = d.artifact(id);
  if (!j) throw std::invalid_argument("dataset has no artifact '" + id + "'");
  return artifact_from_json(*j);
}

void save_edited(const EditedModel& m, const std::filesystem::path& dir, const json& provenance) {
  save_checkpoint(m.model(), dir, provenance);
  const auto edit = dir / "edit.json";
  if (!m.edited()) {
    std::filesystem::remove(edit);
    return;
  }
  json j = {{"cav", to_json(*m.cav())},
            {"clean_mean", m.stats().mean},
            {"per_location", m.stats().per_location},
            {"clean_samples", m.stats().samples}};
  j["gate"] = m.gate() ? json(*m.gate()) : json(nullptr);
  std::ofstream out(edit);
  if (!out) throw std::runtime_error("cannot write " + edit.string());
  out << j.dump(2) << "\n";
}

EditedModel load_edited(const std::filesystem::path& dir) {
  ClassifierModel base = load_checkpoint(dir);
  const auto edit = dir / "edit.json";
  if (!std::filesystem::exists(edit)) return EditedModel(std::move(base));
  std::ifstream in(edit);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(edit.string() + ": " + e.what());
  }
  CleanStats s{j.at("clean_mean").get<double>(), j.at("per_location").get<bool>(),
               j.at("clean_samples").get<std::size_t>()};
  std::optional<double> gate;
  if (!j.at("gate").is_null()) gate = j.at("gate").get<double>();
  return EditedModel(std::move(base), cav_from_json(j.at("cav")), s, gate);
}

}  // namespace shortcut
