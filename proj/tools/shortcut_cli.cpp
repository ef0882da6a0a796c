// shortcut: command-line front end over one project directory.

#include <CLI11.hpp>

#include <algorithm>
#include <csignal>
#include <pthread.h>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "shortcut/annotations.hpp"
#include "shortcut/artifact.hpp"
#include "shortcut/attribution.hpp"
#include "shortcut/bias_model.hpp"
#include "shortcut/config.hpp"
#include "shortcut/io.hpp"
#include "shortcut/mitigation.hpp"
#include "shortcut/project.hpp"
#include "shortcut/retrieval.hpp"
#include "shortcut/reveal.hpp"
#include "shortcut/service.hpp"
#include "shortcut/train.hpp"

using namespace shortcut;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Context {
  fs::path project = "runs/default";
  std::optional<fs::path> config_file;
  bool print_config = false;
  std::map<std::string, std::string> overrides;
  Config config;

  ProjectPaths paths() const { return ProjectPaths{project}; }
};

// Adds --name to `sub`, writing its value into config key `key`.
CLI::Option* keyed(CLI::App* sub, Context& ctx, const std::string& name, const std::string& key,
                   const std::string& help) {
  return sub->add_option_function<std::string>(
      name, [&ctx, key](const std::string& v) { ctx.overrides[key] = v; }, help + " [" + key + "]");
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

// Colored dots, one color per group, on a 256x256 canvas.
void write_scatter(const fs::path& path, const Tensor& coords, const std::vector<std::size_t>& groups) {
  static const std::uint8_t palette[][3] = {{31, 119, 180}, {214, 39, 40},  {44, 160, 44},  {255, 127, 14},
                                            {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127}};
  const std::size_t size = 256, n = coords.dim(0);
  std::vector<std::uint8_t> rgb(size * size * 3, 255);
  double lo[2] = {1e300, 1e300}, hi[2] = {-1e300, -1e300};
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 2; ++a) {
      lo[a] = std::min(lo[a], coords[2 * i + a]);
      hi[a] = std::max(hi[a], coords[2 * i + a]);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t pix[2];
    for (int a = 0; a < 2; ++a) {
      const double span = hi[a] > lo[a] ? hi[a] - lo[a] : 1.0;
      pix[a] = 4 + static_cast<std::size_t>((coords[2 * i + a] - lo[a]) / span * (size - 9));
    }
    const auto* col = palette[(groups.empty() ? 0 : groups[i]) % 8];
    for (std::size_t dy = 0; dy < 3; ++dy) {
      for (std::size_t dx = 0; dx < 3; ++dx) {
        const std::size_t y = size - 1 - (pix[1] + dy - 1), x = pix[0] + dx - 1;
        std::copy(col, col + 3, &rgb[(y * size + x) * 3]);
      }
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_png_rgb(path, size, size, rgb);
}

Split split_of(const std::string& s) {
  try {
    return parse_split(s);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

std::map<std::string, int> ground_truth(const Dataset& d, const std::string& artifact, Split split) {
  auto it = d.annotations.find(artifact);
  if (it == d.annotations.end()) throw std::invalid_argument("dataset has no annotations for '" + artifact + "'");
  std::map<std::string, int> out;
  for (std::size_t r : d.indices(split)) {
    auto l = it->second.find(d.samples[r].id);
    if (l != it->second.end()) out[l->first] = l->second;
  }
  return out;
}

struct Loaded {
  Dataset data;
  ClassifierModel model;
};

fs::path model_dir(const Context& ctx, const std::string& m) {
  return fs::exists(m) || m.find('/') != std::string::npos ? fs::path(m) : ctx.paths().model(m);
}

ConceptVector cav_or_latest(const Context& ctx, const std::string& path, const std::string& artifact) {
  if (!path.empty()) return load_cav(path);
  auto latest = CavRegistry(ctx.paths().cavs()).latest(artifact);
  if (!latest) throw std::invalid_argument("no CAV for '" + artifact + "'; run `cav fit` or pass --cav");
  return *latest;
}

Tensor class_inputs(const Dataset& d, std::optional<std::size_t> cls, std::vector<std::size_t>& rows) {
  for (std::size_t r : d.indices(Split::Train)) {
    if (!cls || d.samples[r].label == *cls) rows.push_back(r);
  }
  if (rows.empty()) throw std::invalid_argument("no training samples selected");
  return d.training_set(rows).inputs;
}

// Ground-truth share of each cluster when the dataset carries annotations.
json cluster_truth(const Dataset& d, const std::string& artifact, const std::vector<std::size_t>& rows,
                   const std::vector<std::size_t>& labels, std::size_t k) {
  auto it = d.annotations.find(artifact);
  if (it == d.annotations.end()) return nullptr;
  json out = json::array();
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t n = 0, pos = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (labels[i] != c) continue;
      ++n;
      auto l = it->second.find(d.samples[rows[i]].id);
      pos += l != it->second.end() && l->second == 1;
    }
    out.push_back({{"cluster", c}, {"size", n}, {"artifact", pos}, {"purity", n ? double(pos) / n : 0.0}});
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  Context ctx;
  CLI::App app{"Shortcut detection and mitigation toolkit"};
  app.require_subcommand(1);
  app.add_option("--project", ctx.project, "project directory")->capture_default_str();
  app.add_option("--config", ctx.config_file, "extra configuration file");
  app.add_flag("--print-config", ctx.print_config, "print the resolved configuration and exit");

  std::string dataset_dir, out, model_name = "vanilla", artifact, cav_path, labels_src = "ground-truth",
              split = "val", layer_arg, space_arg, class_arg;
  std::size_t k = 0, refs = 5;
  std::function<void()> action;
  const CLI::IsMember kSplits({"train", "val", "test"});

  auto dataset_path = [&] { return dataset_dir.empty() ? ctx.paths().dataset() : fs::path(dataset_dir); };
  auto load = [&]() -> Loaded {
    Dataset d = read_dataset(dataset_path());
    return {std::move(d), load_edited(model_dir(ctx, model_name)).model()};
  };
  auto artifact_id = [&] { return artifact.empty() ? ctx.config.get("artifact.id") : artifact; };

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  keyed(synth, ctx, "--modality", "dataset.modality", "image or signal");
  keyed(synth, ctx, "--classes", "dataset.classes", "number of classes");
  keyed(synth, ctx, "--per-class", "dataset.per_class", "samples per class");
  keyed(synth, ctx, "--shape", "dataset.shape", "CxHxW or CxT");
  keyed(synth, ctx, "--noise", "dataset.noise", "noise standard deviation");
  keyed(synth, ctx, "--seed", "dataset.seed", "seed");
  synth->add_option("--out", out, "dataset directory (default <project>/dataset)");
  synth->callback([&] {
    action = [&] {
      Dataset d = generate_synthetic(synth_config(ctx.config));
      d.name = ctx.config.get("dataset.name");
      const fs::path dir = out.empty() ? ctx.paths().dataset() : fs::path(out);
      write_dataset(d, dir);
      std::cout << "wrote " << d.samples.size() << " samples to " << dir.string() << "\n";
    };
  });

  // inject
  auto* inj = app.add_subcommand("inject", "insert an artifact into a dataset");
  keyed(inj, ctx, "--artifact-kind", "artifact.kind", "corner-patch, circle-occlusion, brightness-shift, static-noise");
  keyed(inj, ctx, "--id", "artifact.id", "artifact id");
  keyed(inj, ctx, "--rate", "artifact.rate", "poisoning rate");
  keyed(inj, ctx, "--target-class", "artifact.target_class", "attacked class");
  keyed(inj, ctx, "--patch-size", "artifact.patch_size", "corner patch side");
  keyed(inj, ctx, "--channel", "artifact.channel", "signal channel");
  keyed(inj, ctx, "--amplitude", "artifact.amplitude", "static noise level in standard deviations");
  keyed(inj, ctx, "--seed", "artifact.seed", "seed");
  inj->add_option("--dataset", dataset_dir, "input dataset (default <project>/dataset)");
  inj->add_option("--out", out, "output directory (default: in place)");
  inj->callback([&] {
    action = [&] {
      Dataset d = read_dataset(dataset_path());
      ArtifactSpec spec = resolve_artifact(d, artifact_spec(ctx.config));
      Dataset p = inject(d, spec, ctx.config.get_u64("artifact.seed"));
      const fs::path dir = out.empty() ? dataset_path() : fs::path(out);
      write_dataset(p, dir);
      std::size_t n = 0;
      for (const auto& [sid, l] : p.annotations[spec.id]) n += l == 1;
      std::cout << "injected '" << spec.id << "' into " << n << " samples; wrote " << dir.string() << "\n";
    };
  });

  // train
  auto* tr = app.add_subcommand("train", "train a classifier");
  keyed(tr, ctx, "--arch", "model.arch", "image-cnn-small or signal-cnn-small");
  keyed(tr, ctx, "--epochs", "model.epochs", "epochs");
  keyed(tr, ctx, "--lr", "model.lr", "learning rate");
  keyed(tr, ctx, "--batch-size", "model.batch_size", "batch size");
  keyed(tr, ctx, "--seed", "model.seed", "seed");
  tr->add_option("--dataset", dataset_dir, "dataset directory");
  tr->add_option("--out", out, "checkpoint directory (default <project>/models/vanilla)");
  tr->callback([&] {
    action = [&] {
      Dataset d = read_dataset(dataset_path());
      TrainConfig tc = train_config(ctx.config);
      Shape shape = d.sample_shape();
      if (d.modality == Modality::Signal) shape = {shape[0], shape[2]};
      ClassifierModel m = build_model(model_architecture(ctx.config), d.num_classes(), shape, tc.seed);
      TrainResult r = train(std::move(m), d.training_set(Split::Train), tc);
      const double val = accuracy(r.model, d.training_set(Split::Val));
      const fs::path dir = out.empty() ? ctx.paths().model() : fs::path(out);
      save_checkpoint(r.model, dir, {{"epochs", tc.epochs}, {"lr", tc.learning_rate}, {"seed", tc.seed},
                                     {"loss_history", r.loss_history}, {"val_accuracy", val}});
      std::cout << "val accuracy " << val << "; wrote " << dir.string() << "\n";
    };
  });

  // reveal
  auto* rev = app.add_subcommand("reveal", "explore prediction strategies");
  rev->require_subcommand(1);
  auto reveal_flags = [&](CLI::App* s) {
    s->add_option("--model", model_name, "model name or directory")->capture_default_str();
    s->add_option("--dataset", dataset_dir, "dataset directory");
    s->add_option("--layer", layer_arg, "layer (spray: default input heatmaps)");
    s->add_option("--class", class_arg, "class to explain / restrict to");
    s->add_option("--space", space_arg, "activation or relevance");
    s->add_option("--k", k, "clusters or prototypes");
    s->add_option("--artifact", artifact, "artifact whose ground truth summarizes clusters");
    s->add_option("--out", out, "output directory (default <project>/reveal)");
  };
  auto opt_class = [&]() -> std::optional<std::size_t> {
    if (class_arg.empty()) return std::nullopt;
    try {
      return std::stoul(class_arg);
    } catch (const std::exception&) {
      throw UsageError("--class must be an integer");
    }
  };
  auto class_or_attacked = [&](const Dataset& d) {
    if (auto c = opt_class()) return *c;
    return dataset_artifact(d, artifact_id()).target_class;
  };
  auto reveal_out = [&] { return out.empty() ? ctx.paths().reveal() : fs::path(out); };

  auto* spray_cmd = rev->add_subcommand("spray", "spectral clustering of heatmaps");
  reveal_flags(spray_cmd);
  spray_cmd->callback([&] {
    action = [&] {
      auto [d, m] = load();
      const std::size_t cls = class_or_attacked(d);
      std::vector<std::size_t> rows;
      Tensor x = class_inputs(d, cls, rows);
      Tensor vectors;
      if (layer_arg.empty() || layer_arg == "input") {
        Tensor heat = channel_summed(attribute(m, x, cls).input);
        vectors = heat.reshaped({heat.dim(0), heat.size() / heat.dim(0)});
      } else {
        vectors = latent_features(m, layer_arg, x, FeatureSpace::Relevance, cls);
      }
      const std::size_t kk = k ? k : ctx.config.get_size("service.clusters");
      SprayResult s = spray(vectors, kk);
      json ids = json::array();
      for (std::size_t r : rows) ids.push_back(d.samples[r].id);
      json j = {{"class", cls}, {"layer", layer_arg.empty() ? "input" : layer_arg}, {"sample_ids", ids},
                {"clusters", to_json(s.clusters)}, {"embedding", to_json(s.embedding)},
                {"truth", cluster_truth(d, artifact_id(), rows, s.clusters.labels, kk)}};
      const fs::path dir = reveal_out();
      write_json(dir / "spray.json", j);
      write_scatter(dir / "spray.png", s.embedding.coords, s.clusters.labels);
      std::cout << j["truth"].dump() << "\n";
    };
  });

  auto* concepts_cmd = rev->add_subcommand("concepts", "channel embedding with outlier scores");
  reveal_flags(concepts_cmd);
  concepts_cmd->callback([&] {
    action = [&] {
      auto [d, m] = load();
      const std::string layer = layer_arg.empty() ? ctx.config.get("cav.layer") : layer_arg;
      const FeatureSpace space = parse_feature_space(space_arg.empty() ? "activation" : space_arg);
      std::vector<std::size_t> rows;
      Tensor x = class_inputs(d, opt_class(), rows);
      std::optional<std::size_t> target = space == FeatureSpace::Relevance
                                              ? std::optional(class_or_attacked(d))
                                              : std::nullopt;
      ConceptEmbedding ce = concept_embedding(latent_features(m, layer, x, space, target));
      json j = to_json(ce);
      j["layer"] = layer;
      j["space"] = to_string(space);
      std::vector<std::size_t> groups(ce.lof.size(), 0);
      for (std::size_t c : ce.outliers()) groups[c] = 1;
      const fs::path dir = reveal_out();
      write_json(dir / "concepts.json", j);
      write_scatter(dir / "concepts.png", ce.embedding.coords, groups);
      std::cout << "outliers " << json(ce.outliers()).dump() << "\n";
    };
  });

  auto* dora_cmd = rev->add_subcommand("dora", "channel distances from reference samples");
  reveal_flags(dora_cmd);
  dora_cmd->add_option("--refs", refs, "reference samples per channel")->capture_default_str();
  dora_cmd->callback([&] {
    action = [&] {
      auto [d, m] = load();
      const std::string layer = layer_arg.empty() ? ctx.config.get("cav.layer") : layer_arg;
      std::vector<std::size_t> rows;
      Tensor x = class_inputs(d, opt_class(), rows);
      DistanceMatrix dist = dora_distances(m, layer, x, refs);
      Embedding2D e = classical_mds(dist);
      auto lof = local_outlier_factor(e.coords, std::min<std::size_t>(10, dist.size() - 1));
      std::vector<std::size_t> groups(lof.size(), 0), outliers;
      for (std::size_t c = 0; c < lof.size(); ++c) {
        if (lof[c] > 1.5) {
          groups[c] = 1;
          outliers.push_back(c);
        }
      }
      json j = {{"layer", layer}, {"embedding", to_json(e)}, {"lof", lof}, {"outliers", outliers}};
      const fs::path dir = reveal_out();
      write_json(dir / "dora.json", j);
      write_scatter(dir / "dora.png", e.coords, groups);
      std::cout << "outliers " << json(outliers).dump() << "\n";
    };
  });

  auto* pcx_cmd = rev->add_subcommand("pcx", "prototypes of pooled latent relevances");
  reveal_flags(pcx_cmd);
  pcx_cmd->callback([&] {
    action = [&] {
      auto [d, m] = load();
      const std::string layer = layer_arg.empty() ? ctx.config.get("cav.layer") : layer_arg;
      const std::size_t cls = class_or_attacked(d);
      std::vector<std::size_t> rows;
      Tensor x = class_inputs(d, cls, rows);
      Tensor rel = latent_features(m, layer, x, FeatureSpace::Relevance, cls);
      const std::size_t kk = k ? k : ctx.config.get_size("service.prototypes");
      PrototypeSet p = pcx(rel, kk, 0, cls);
      json j = to_json(p);
      j["layer"] = layer;
      j["truth"] = cluster_truth(d, artifact_id(), rows, [&] {
        std::vector<std::size_t> labels(rows.size());
        for (std::size_t q = 0; q < p.prototypes.size(); ++q)
          for (std::size_t i : p.prototypes[q].covered) labels[i] = q;
        return labels;
      }(), p.prototypes.size());
      const fs::path dir = reveal_out();
      write_json(dir / "pcx.json", j);
      Embedding2D e = classical_mds(pairwise_distances(rel));
      write_scatter(dir / "pcx.png", e.coords, p.assignment);
      for (const auto& q : p.prototypes) std::cout << "prototype weight " << q.weight << "\n";
    };
  });

  // cav
  auto* cav = app.add_subcommand("cav", "fit and evaluate concept activation vectors");
  cav->require_subcommand(1);
  auto* fit = cav->add_subcommand("fit", "fit a CAV");
  keyed(fit, ctx, "--method", "cav.method", "svm, pattern or neuron");
  keyed(fit, ctx, "--layer", "cav.layer", "layer");
  keyed(fit, ctx, "--space", "cav.space", "activation or relevance");
  keyed(fit, ctx, "--target-class", "cav.target_class", "class for relevance CAVs");
  keyed(fit, ctx, "--lambda", "cav.lambda", "SVM regularization");
  std::size_t neuron = 0;
  fit->add_option("--neuron", neuron, "channel for --method neuron");
  fit->add_option("--labels", labels_src,
                  "ground-truth (train-split annotations), store (project annotations) or a JSONL file")
      ->capture_default_str();
  fit->add_option("--artifact", artifact, "artifact id");
  fit->add_option("--model", model_name, "model name or directory")->capture_default_str();
  fit->add_option("--dataset", dataset_dir, "dataset directory");
  fit->add_option("--out", out, "also write the CAV here");
  fit->callback([&] {
    action = [&] {
      auto [d, m] = load();
      const std::string id = artifact_id();
      CavRegistry registry(ctx.paths().cavs());
      RefitRequest req;
      req.artifact_id = id;
      req.layer = ctx.config.get("cav.layer");
      req.method = parse_cav_method(ctx.config.get("cav.method"));
      req.space = parse_feature_space(ctx.config.get("cav.space"));
      req.target_class = ctx.config.get_optional_size("cav.target_class");
      if (req.space == FeatureSpace::Relevance && !req.target_class) {
        req.target_class = dataset_artifact(d, id).target_class;
      }
      req.svm = svm_options(ctx.config);
      auto previous = registry.latest(id);
      req.previous_iteration = previous ? previous->iteration : 0;
      if (labels_src == "ground-truth") {
        req.labels = ground_truth(d, id, Split::Train);
      } else {
        AnnotationStore store = labels_src == "store" ? AnnotationStore(ctx.paths().annotations()) : AnnotationStore();
        if (labels_src != "store") {
          std::ifstream in(labels_src);
          if (!in) throw UsageError("cannot read labels file " + labels_src);
          store.import_jsonl(in);
        }
        req.labels = store.labels(id, {LabelSource::Seed, LabelSource::Manual});
      }
      if (d.annotations.count(id)) req.held_out = ground_truth(d, id, Split::Val);
      // Same labels and settings as the latest iteration: refit in place.
      if (previous && previous->fingerprint == label_fingerprint(req.labels) && previous->layer == req.layer &&
          previous->method == req.method && previous->space == req.space && previous->target_class == req.target_class) {
        req.previous_iteration = previous->iteration - 1;
      }

      ConceptVector c;
      double auc = 0, ap = 0;
      if (req.method == CavMethod::Neuron) {
        c = neuron_cav(req.layer, neuron,
                       LayerSplit(m, req.layer).channels());
        c.artifact_id = id;
        c.iteration = req.previous_iteration + 1;
      } else {
        RefitResult r = refit_iteration(d, m, req);
        c = r.cav;
        auc = r.auc;
        ap = r.ap;
      }
      const fs::path saved = registry.save(c);
      if (!out.empty()) save_cav(c, out);
      std::cout << "iteration " << c.iteration << " held-out AUC " << auc << " AP " << ap << "; wrote "
                << (out.empty() ? saved : fs::path(out)).string() << "\n";
    };
  });

  auto* ev = cav->add_subcommand("eval", "retrieval metrics of a CAV on ground-truth labels");
  ev->add_option("--cav", cav_path, "CAV file (default: latest for the artifact)");
  ev->add_option("--artifact", artifact, "artifact id");
  ev->add_option("--split", split, "split to score")->capture_default_str()->check(kSplits);
  ev->add_option("--model", model_name, "model name or directory")->capture_default_str();
  ev->add_option("--dataset", dataset_dir, "dataset directory");
  ev->add_option("--out", out, "write metrics JSON here");
  ev->callback([&] {
    action = [&] {
      auto [d, m] = load();
      const std::string id = artifact_id();
      ConceptVector c = cav_or_latest(ctx, cav_path, id);
      const auto truth = ground_truth(d, id, split_of(split));
      std::vector<std::string> ids;
      std::vector<std::size_t> rows;
      for (const auto& [sid, l] : truth) {
        ids.push_back(sid);
        rows.push_back(*d.find(sid));
      }
      Tensor x = d.training_set(rows).inputs;
      BiasScoreTable t = c.space == FeatureSpace::Relevance ? bias_scores_relevance(c, m, ids, x)
                                                            : bias_scores_activation(c, m, ids, x);
      RetrievalMetrics r = retrieval_metrics(t, truth);
      json j = {{"artifact_id", id}, {"iteration", c.iteration}, {"layer", c.layer}, {"split", split},
                {"auc", r.auc}, {"ap", r.ap}, {"samples", truth.size()}};
      if (!out.empty()) write_json(out, j);
      std::cout << j.dump() << "\n";
    };
  });

  // rank
  auto* rank = app.add_subcommand("rank", "bias-score table and inspection queue");
  rank->add_option("--cav", cav_path, "CAV file (default: latest)");
  rank->add_option("--artifact", artifact, "artifact id");
  std::string rank_split = "train";
  rank->add_option("--split", rank_split, "split to rank")->capture_default_str()->check(kSplits);
  keyed(rank, ctx, "--page-size", "service.page_size", "queue page size");
  rank->add_option("--model", model_name, "model name or directory")->capture_default_str();
  rank->add_option("--dataset", dataset_dir, "dataset directory");
  rank->add_option("--out", out, "output directory (default <project>/scores)");
  rank->callback([&] {
    action = [&] {
      auto [d, m] = load();
      const std::string id = artifact_id();
      ConceptVector c = cav_or_latest(ctx, cav_path, id);
      std::vector<std::string> ids;
      std::vector<std::size_t> rows = d.indices(split_of(rank_split));
      for (std::size_t r : rows) ids.push_back(d.samples[r].id);
      Tensor x = d.training_set(rows).inputs;
      BiasScoreTable t = c.space == FeatureSpace::Relevance ? bias_scores_relevance(c, m, ids, x)
                                                            : bias_scores_activation(c, m, ids, x);
      AnnotationStore store(ctx.paths().annotations());
      InspectionQueue q = rank_for_inspection(t, store.labels(id), ctx.config.get_size("service.page_size"), true);
      const fs::path dir = out.empty() ? ctx.paths().scores() : fs::path(out);
      fs::create_directories(dir);
      write_scores_csv(dir / (id + ".csv"), t, d.annotations.count(id) ? d.annotations.at(id) : std::map<std::string, int>{});
      write_json(dir / (id + "_queue.json"), to_json(q));
      std::cout << "ranked " << t.size() << " samples; page 0:";
      for (const auto& sid : q.page(0)) std::cout << " " << sid;
      std::cout << "\n";
    };
  });

  // localize
  auto* loc = app.add_subcommand("localize", "artifact masks from concept heatmaps");
  loc->add_option("--cav", cav_path, "CAV file (default: latest)");
  loc->add_option("--artifact", artifact, "artifact id");
  loc->add_option("--split", split, "split")->capture_default_str()->check(kSplits);
  loc->add_option("--model", model_name, "model name or directory")->capture_default_str();
  loc->add_option("--dataset", dataset_dir, "dataset directory");
  loc->add_option("--out", out, "output directory (default <project>/localization)");
  loc->callback([&] {
    action = [&] {
      auto [d, m] = load();
      const std::string id = artifact_id();
      ConceptVector c = cav_or_latest(ctx, cav_path, id);
      LayerSplit ls(m, c.layer);
      const fs::path dir = out.empty() ? ctx.paths().localization() : fs::path(out);
      fs::create_directories(dir / "masks");
      const auto truth = ground_truth(d, id, split_of(split));
      const auto masks = d.masks.count(id) ? d.masks.at(id) : std::map<std::string, Tensor>{};
      json items = json::array();
      double iou_sum = 0, rf_sum = 0;
      std::size_t n = 0;
      for (const auto& [sid, l] : truth) {
        if (l != 1) continue;
        const std::size_t r = *d.find(sid);
        std::optional<Tensor> gt;
        if (auto it = masks.find(sid); it != masks.end()) gt = it->second;
        LocalizationResult res = localize(c, ls, d.training_set(std::vector<std::size_t>{r}).inputs, gt);
        res.sample_id = sid;
        res.artifact_id = id;
        if (d.modality == Modality::Image) {
          io::write_png(dir / "masks" / (sid + ".png"), res.mask.reshaped({1, res.mask.dim(0), res.mask.dim(1)}));
        } else {
          io::write_csv(dir / "masks" / (sid + ".csv"), res.mask);
        }
        if (res.iou) {
          iou_sum += *res.iou;
          rf_sum += *res.relevance_fraction;
          ++n;
        }
        items.push_back(to_json(res));
      }
      json j = {{"artifact_id", id}, {"layer", c.layer}, {"split", split}, {"samples", items}};
      j["mean_iou"] = n ? json(iou_sum / n) : json(nullptr);
      j["mean_relevance_fraction"] = n ? json(rf_sum / n) : json(nullptr);
      write_json(dir / (id + ".json"), j);
      std::cout << "mean IoU " << j["mean_iou"].dump() << " relevance fraction "
                << j["mean_relevance_fraction"].dump() << "\n";
    };
  });

  // mitigate
  auto* mit = app.add_subcommand("mitigate", "unlearn or project out an artifact");
  mit->require_subcommand(1);
  std::string method_name;
  for (const char* name : {"rrr", "rrclarc", "pclarc", "rpclarc"}) {
    auto* s = mit->add_subcommand(name, std::string(name) + " mitigation");
    keyed(s, ctx, "--lambda-grid", "mitigation.lambda_grid", "comma-separated lambdas");
    keyed(s, ctx, "--target-class", "mitigation.target_class", "class whose output is penalized");
    keyed(s, ctx, "--mask-source", "mitigation.mask_source", "ground-truth, heatmap or binarized");
    keyed(s, ctx, "--epochs", "mitigation.epochs", "fine-tuning epochs");
    keyed(s, ctx, "--lr", "mitigation.lr", "fine-tuning learning rate");
    keyed(s, ctx, "--latent-output", "mitigation.latent_output", "margin or logit");
    keyed(s, ctx, "--max-grad-norm", "mitigation.max_grad_norm", "gradient clip, 0 = off");
    keyed(s, ctx, "--gate", "mitigation.gate", "rpclarc bias-score gate");
    keyed(s, ctx, "--per-location", "mitigation.per_location", "pclarc per-location projection");
    s->add_option("--cav", cav_path, "CAV file (default: latest)");
    s->add_option("--artifact", artifact, "artifact id");
    s->add_option("--model", model_name, "model to start from")->capture_default_str();
    s->add_option("--dataset", dataset_dir, "dataset directory");
    s->add_option("--out", out, "output model directory (default <project>/models/<method>)");
    s->callback([&, name] {
      method_name = name;
      action = [&] {
        auto [d, m] = load();
        const std::string id = artifact_id();
        const ArtifactSpec spec = dataset_artifact(d, id);
        const MitigationMethod method = parse_mitigation_method(method_name);
        MitigationConfig mc = mitigation_config(ctx.config, method);
        std::optional<ConceptVector> c;
        if (method != MitigationMethod::Rrr || mc.mask_source != MaskSource::GroundTruth || !cav_path.empty()) {
          c = cav_or_latest(ctx, cav_path, id);
        }
        MitigationResult r = mitigate(m, d, spec, c, mc);
        const fs::path dir = out.empty() ? ctx.paths().model(method_name) : fs::path(out);
        json trials = json::array();
        for (const auto& t : r.trials) {
          trials.push_back({{"lambda", t.lambda}, {"ok", t.ok}, {"error", t.error},
                            {"clean_val", t.clean_val}, {"biased_val", t.biased_val}});
        }
        save_edited(r.model, dir, {{"method", method_name}, {"lambda", r.lambda}, {"trials", trials}});
        json report = to_json(r.report);
        write_json(ctx.paths().reports() / (method_name + ".json"), report);
        std::cout << report.dump() << "\n";
      };
    });
  }

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "evaluation report of a model");
  eval->add_option("--model", model_name, "model name or directory")->capture_default_str();
  eval->add_option("--cav", cav_path, "CAV for TCAV and retrieval metrics (default: latest if any)");
  eval->add_option("--artifact", artifact, "artifact id");
  eval->add_option("--dataset", dataset_dir, "dataset directory");
  eval->add_option("--out", out, "report path (default <project>/reports/<model>.json)");
  eval->callback([&] {
    action = [&] {
      Dataset d = read_dataset(dataset_path());
      EditedModel em = load_edited(model_dir(ctx, model_name));
      const std::string id = artifact_id();
      std::optional<ConceptVector> c;
      if (!cav_path.empty()) c = load_cav(cav_path);
      else c = CavRegistry(ctx.paths().cavs()).latest(id);
      EvalReport r = evaluate(em, d, dataset_artifact(d, id), c);
      r.method = fs::path(model_name).filename().string();
      json j = to_json(r);
      write_json(out.empty() ? ctx.paths().reports() / (r.method + ".json") : fs::path(out), j);
      std::cout << j.dump() << "\n";
    };
  });

  // serve
  auto* serve = app.add_subcommand("serve", "annotation service");
  keyed(serve, ctx, "--host", "service.host", "bind address");
  keyed(serve, ctx, "--port", "service.port", "port, 0 picks a free one");
  serve->add_option("--model", model_name, "model name")->capture_default_str();
  serve->callback([&] {
    action = [&] {
      ServiceOptions o = service_options(ctx.paths(), ctx.config);
      o.model = model_name;
      // Worker threads inherit the blocked mask; the main thread waits for the signal.
      sigset_t set;
      sigemptyset(&set);
      sigaddset(&set, SIGINT);
      sigaddset(&set, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &set, nullptr);
      Service s(o);
      const int port = s.start();
      std::cout << "serving " << ctx.project.string() << " on http://" << o.host << ":" << port << std::endl;
      int sig = 0;
      sigwait(&set, &sig);
      s.stop();
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    ctx.config = project_config(ctx.paths());
    if (ctx.config_file) ctx.config.merge_file(*ctx.config_file);
    for (const auto& [key, value] : ctx.overrides) ctx.config.set(key, value);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  if (ctx.print_config) {
    std::cout << ctx.config.dump();
    return 0;
  }
  try {
    action();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
