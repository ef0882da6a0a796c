#include "shortcut/service.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <httplib.h>

#include "shortcut/attribution.hpp"
#include "shortcut/io.hpp"
#include "shortcut/reveal.hpp"

namespace shortcut {

using nlohmann::json;

namespace {

struct HttpError : std::runtime_error {
  int status;
  HttpError(int s, const std::string& m) : std::runtime_error(m), status(s) {}
};

void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

std::size_t query_size(const httplib::Request& req, const char* key, std::size_t fallback) {
  if (!req.has_param(key)) return fallback;
  const std::string v = req.get_param_value(key);
  std::size_t used = 0;
  unsigned long long n = 0;
  try {
    n = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || v[0] == '-') {
    throw HttpError(422, std::string("query parameter '") + key + "' must be a non-negative integer");
  }
  return static_cast<std::size_t>(n);
}

struct Rgb {
  std::size_t h, w;
  std::vector<std::uint8_t> px;
  Rgb(std::size_t h_, std::size_t w_, std::uint8_t fill) : h(h_), w(w_), px(h_ * w_ * 3, fill) {}
  std::uint8_t* at(std::size_t y, std::size_t x) { return &px[(y * w + x) * 3]; }
};

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Nearest-neighbor upscale of an image payload, or a per-channel line plot of a
// signal (one horizontal band per channel).
Rgb render_sample(const Tensor& payload, Modality modality, std::size_t size) {
  const std::size_t c = payload.dim(0), h = payload.dim(1), w = payload.dim(2);
  Rgb out(size, size, 255);
  if (modality == Modality::Image) {
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const std::size_t sy = y * h / size, sx = x * w / size;
        auto* p = out.at(y, x);
        for (std::size_t k = 0; k < 3; ++k) {
          p[k] = to_byte(payload[((c == 3 ? k : 0) * h + sy) * w + sx]);
        }
      }
    }
    return out;
  }
  const double lo = payload.min(), hi = payload.max();
  const double span = hi > lo ? hi - lo : 1.0;
  const std::size_t band = std::max<std::size_t>(1, size / c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::size_t prev = 0;
    for (std::size_t x = 0; x < size; ++x) {
      const double v = (payload[ch * w + x * w / size] - lo) / span;
      const std::size_t y = std::min(size - 1, ch * band + static_cast<std::size_t>((1.0 - v) * (band - 1)));
      const std::size_t a = x ? std::min(prev, y) : y, b = x ? std::max(prev, y) : y;
      for (std::size_t yy = a; yy <= b; ++yy) {
        auto* p = out.at(yy, x);
        p[0] = p[1] = p[2] = 40;
      }
      prev = y;
    }
  }
  return out;
}

// Blends a mask-layout heatmap [R, T] (blue-white-red by max |value|) at 50%.
void blend_heatmap(Rgb& img, const Tensor& heat) {
  const std::size_t r = heat.dim(0), t = heat.dim(1);
  double scale = 0.0;
  for (double v : heat.values()) scale = std::max(scale, std::abs(v));
  if (scale == 0.0) scale = 1.0;
  for (std::size_t y = 0; y < img.h; ++y) {
    for (std::size_t x = 0; x < img.w; ++x) {
      const double v = heat[(y * r / img.h) * t + x * t / img.w] / scale;
      double col[3] = {1.0, 1.0, 1.0};
      if (v >= 0) {
        col[1] = col[2] = 1.0 - v;
      } else {
        col[0] = col[1] = 1.0 + v;
      }
      auto* p = img.at(y, x);
      for (int k = 0; k < 3; ++k) p[k] = to_byte(0.5 * p[k] / 255.0 + 0.5 * col[k]);
    }
  }
}

Tensor batch_of(const Sample& s) {
  Shape shape = s.payload.shape();
  shape.insert(shape.begin(), 1);
  return s.payload.reshaped(shape);
}

}  // namespace

std::string to_string(JobState s) {
  switch (s) {
    case JobState::Queued: return "queued";
    case JobState::Running: return "running";
    case JobState::Done: return "done";
    case JobState::Failed: return "failed";
  }
  return "queued";
}

json to_json(const RefitJob& j) {
  json out = {{"id", j.id}, {"artifact_id", j.artifact_id}, {"state", to_string(j.state)},
              {"metrics", j.metrics}};
  out["iteration"] = j.iteration ? json(*j.iteration) : json(nullptr);
  out["error"] = j.error.empty() ? json(nullptr) : json(j.error);
  return out;
}

ServiceOptions service_options(const ProjectPaths& project, const Config& c) {
  ServiceOptions o;
  o.project = project;
  o.host = c.get("service.host");
  o.port = static_cast<int>(c.get_size("service.port"));
  o.page_size = c.get_size("service.page_size");
  o.thumbnail = c.get_size("service.thumbnail");
  o.prototypes = c.get_size("service.prototypes");
  o.clusters = c.get_size("service.clusters");
  o.layer = c.get("cav.layer");
  o.method = parse_cav_method(c.get("cav.method"));
  o.space = parse_feature_space(c.get("cav.space"));
  o.target_class = c.get_optional_size("cav.target_class");
  o.svm = svm_options(c);
  return o;
}

Service::Service(ServiceOptions options)
    : options_(std::move(options)),
      data_(read_dataset(options_.project.dataset())),
      model_(load_checkpoint(options_.project.model(options_.model))),
      registry_(options_.project.cavs()),
      store_(options_.project.annotations()),
      server_(std::make_unique<httplib::Server>()) {
  if (options_.page_size == 0) throw std::invalid_argument("page size must be positive");
  if (!model_.has_layer(options_.layer)) {
    throw std::invalid_argument("model has no layer '" + options_.layer + "'");
  }
  train_rows_ = data_.indices(Split::Train);
  for (std::size_t r : train_rows_) train_ids_.push_back(data_.samples[r].id);
  train_inputs_ = data_.training_set(train_rows_).inputs;
  routes();
}

Service::~Service() {
  stop();
  std::vector<std::thread> workers;
  {
    std::lock_guard lock(job_mutex_);
    workers.swap(workers_);
  }
  for (auto& t : workers) t.join();
}

int Service::bind() {
  port_ = options_.port == 0 ? server_->bind_to_any_port(options_.host)
                             : (server_->bind_to_port(options_.host, options_.port) ? options_.port : -1);
  if (port_ < 0) throw std::runtime_error("cannot bind " + options_.host + ":" + std::to_string(options_.port));
  return port_;
}

int Service::start() {
  bind();
  listener_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void Service::run() {
  bind();
  server_->listen_after_bind();
}

void Service::stop() {
  if (server_) server_->stop();
  if (listener_.joinable() && listener_.get_id() != std::this_thread::get_id()) listener_.join();
}

bool Service::known_artifact(const std::string& id) const { return data_.artifact(id) != nullptr; }

std::optional<ConceptVector> Service::current_cav(const std::string& artifact_id) const {
  std::lock_guard lock(cache_mutex_);
  return registry_.latest(artifact_id);
}

std::shared_ptr<const BiasScoreTable> Service::scores(const ConceptVector& cav) {
  const std::string key = cav.artifact_id + "@" + std::to_string(cav.iteration);
  {
    std::lock_guard lock(cache_mutex_);
    auto it = score_cache_.find(key);
    if (it != score_cache_.end()) return it->second;
  }
  auto table = std::make_shared<BiasScoreTable>(
      cav.space == FeatureSpace::Relevance
          ? bias_scores_relevance(cav, model_, train_ids_, train_inputs_)
          : bias_scores_activation(cav, model_, train_ids_, train_inputs_));
  table->artifact_id = cav.artifact_id;
  table->cav_iteration = cav.iteration;
  std::lock_guard lock(cache_mutex_);
  return score_cache_.emplace(key, std::move(table)).first->second;
}

json Service::artifact_summary(const std::string& id) const {
  json j = {{"id", id}, {"iteration", 0}, {"auc", nullptr}, {"ap", nullptr}, {"layer", nullptr}};
  if (auto cav = current_cav(id)) {
    j["iteration"] = cav->iteration;
    j["layer"] = cav->layer;
    j["method"] = to_string(cav->method);
    if (cav->diagnostics.contains("held_out_auc")) j["auc"] = cav->diagnostics["held_out_auc"];
    if (cav->diagnostics.contains("held_out_ap")) j["ap"] = cav->diagnostics["held_out_ap"];
  }
  const auto labels = store_.labels(id);
  std::size_t pos = 0;
  for (const auto& [sid, label] : labels) pos += label == 1;
  j["labels"] = {{"positive", pos}, {"negative", labels.size() - pos}};
  std::lock_guard lock(job_mutex_);
  auto active = active_.find(id);
  j["job"] = active == active_.end() ? json(nullptr) : json(active->second);
  return j;
}

RefitJob Service::launch_refit(const std::string& artifact_id, const json& body) {
  RefitRequest req;
  req.artifact_id = artifact_id;
  req.layer = options_.layer;
  req.method = options_.method;
  req.space = options_.space;
  req.target_class = options_.target_class;
  req.svm = options_.svm;
  try {
    if (body.contains("layer")) req.layer = body["layer"].get<std::string>();
    if (body.contains("method")) req.method = parse_cav_method(body["method"].get<std::string>());
    if (body.contains("space")) req.space = parse_feature_space(body["space"].get<std::string>());
    if (body.contains("target_class")) req.target_class = body["target_class"].get<std::size_t>();
  } catch (const std::exception& e) {
    throw HttpError(422, e.what());
  }
  if (!model_.has_layer(req.layer)) throw HttpError(422, "model has no layer '" + req.layer + "'");
  if (req.space == FeatureSpace::Relevance && !req.target_class) {
    req.target_class = dataset_artifact(data_, artifact_id).target_class;
  }

  std::lock_guard lock(job_mutex_);
  if (active_.count(artifact_id)) {
    throw HttpError(409, "refit already running for '" + artifact_id + "' (" + active_[artifact_id] + ")");
  }
  RefitJob job;
  job.id = "job-" + std::to_string(next_job_++);
  job.artifact_id = artifact_id;
  jobs_[job.id] = job;
  active_[artifact_id] = job.id;
  workers_.emplace_back(&Service::run_refit, this, job.id, std::move(req));
  return job;
}

void Service::run_refit(std::string job_id, RefitRequest req) {
  {
    std::lock_guard lock(job_mutex_);
    jobs_[job_id].state = JobState::Running;
  }
  RefitJob done;
  try {
    if (options_.before_refit) options_.before_refit(req.artifact_id);
    req.labels = store_.labels(req.artifact_id, {LabelSource::Seed, LabelSource::Manual});
    req.held_out = store_.labels(req.artifact_id, {LabelSource::GroundTruth});
    std::size_t held_pos = 0;
    for (const auto& [sid, label] : req.held_out) held_pos += label == 1;
    if (held_pos == 0 || held_pos == req.held_out.size()) req.held_out.clear();
    auto previous = current_cav(req.artifact_id);
    req.previous_iteration = previous ? previous->iteration : 0;

    RefitResult r = refit_iteration(data_, model_, req);
    {
      std::lock_guard lock(cache_mutex_);
      registry_.save(r.cav);
    }
    done.state = JobState::Done;
    done.iteration = r.cav.iteration;
    std::size_t pos = 0;
    for (const auto& [sid, label] : req.labels) pos += label == 1;
    done.metrics = {{"positive", pos}, {"negative", req.labels.size() - pos}, {"held_out", req.held_out.size()}};
    done.metrics["auc"] = req.held_out.empty() ? json(nullptr) : json(r.auc);
    done.metrics["ap"] = req.held_out.empty() ? json(nullptr) : json(r.ap);
  } catch (const std::exception& e) {
    done.state = JobState::Failed;
    done.error = e.what();
  }
  std::lock_guard lock(job_mutex_);
  RefitJob& job = jobs_[job_id];
  job.state = done.state;
  job.iteration = done.iteration;
  job.metrics = done.metrics;
  job.error = done.error;
  active_.erase(job.artifact_id);
  job_done_.notify_all();
}

std::optional<RefitJob> Service::wait_for_job(const std::string& job_id) {
  std::unique_lock lock(job_mutex_);
  if (!jobs_.count(job_id)) return std::nullopt;
  job_done_.wait(lock, [&] {
    const auto s = jobs_[job_id].state;
    return s == JobState::Done || s == JobState::Failed;
  });
  return jobs_[job_id];
}

void Service::routes() {
  auto& s = *server_;

  s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const HttpError& e) {
      send_json(res, {{"error", e.what()}}, e.status);
    } catch (const std::exception& e) {
      send_json(res, {{"error", e.what()}}, 500);
    }
  });

  s.Get("/api/datasets", [this](const httplib::Request&, httplib::Response& res) {
    json splits = json::object();
    for (Split sp : {Split::Train, Split::Val, Split::Test}) splits[to_string(sp)] = data_.indices(sp).size();
    json artifacts = json::array();
    for (const auto& a : data_.artifacts) artifacts.push_back(a.value("id", ""));
    send_json(res, json::array({{{"name", data_.name},
                                 {"modality", to_string(data_.modality)},
                                 {"classes", data_.classes},
                                 {"shape", data_.sample_shape()},
                                 {"samples", data_.samples.size()},
                                 {"splits", splits},
                                 {"artifacts", artifacts}}}));
  });

  s.Get("/api/artifacts", [this](const httplib::Request&, httplib::Response& res) {
    json out = json::array();
    for (const auto& a : data_.artifacts) out.push_back(artifact_summary(a.value("id", "")));
    send_json(res, out);
  });

  s.Get(R"(/api/artifacts/([^/]+)/queue)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (!known_artifact(id)) throw HttpError(404, "unknown artifact '" + id + "'");
    std::optional<ConceptVector> cav;
    if (req.has_param("iteration")) {
      const std::size_t it = query_size(req, "iteration", 0);
      const auto its = registry_.iterations(id);
      if (std::find(its.begin(), its.end(), it) == its.end()) {
        throw HttpError(404, "artifact '" + id + "' has no CAV iteration " + std::to_string(it));
      }
      std::lock_guard lock(cache_mutex_);
      cav = registry_.load(id, it);
    } else {
      cav = current_cav(id);
    }
    if (!cav) throw HttpError(409, "artifact '" + id + "' has no CAV yet; submit seed labels and refit");
    const std::size_t size = query_size(req, "size", options_.page_size);
    if (size == 0) throw HttpError(422, "size must be positive");
    const std::size_t page = query_size(req, "page", 0);
    bool exclude_negatives = true;
    if (req.has_param("exclude_negatives")) exclude_negatives = req.get_param_value("exclude_negatives") != "false";

    const auto table = scores(*cav);
    const auto labels = store_.labels(id);
    const InspectionQueue q = rank_for_inspection(*table, labels, size, exclude_negatives);
    json items = json::array();
    std::map<std::string, double> score_of;
    for (std::size_t i = 0; i < q.order.size(); ++i) score_of[q.order[i]] = q.scores[i];
    for (const std::string& sid : q.page(page)) {
      auto l = labels.find(sid);
      items.push_back({{"sample_id", sid},
                       {"score", score_of[sid]},
                       {"label", l == labels.end() ? json(nullptr) : json(l->second)},
                       {"thumbnail", "/api/samples/" + sid + "/thumbnail"},
                       {"overlay", "/api/samples/" + sid + "/overlay?artifact=" + id}});
    }
    send_json(res, {{"artifact_id", id},
                    {"iteration", cav->iteration},
                    {"page", page},
                    {"size", size},
                    {"pages", q.page_count()},
                    {"total", q.order.size()},
                    {"items", items},
                    {"exemplars", q.exemplars}});
  });

  s.Get(R"(/api/samples/([^/]+)/thumbnail)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string sid = req.matches[1];
    auto row = data_.find(sid);
    if (!row) throw HttpError(404, "unknown sample '" + sid + "'");
    Rgb img = render_sample(data_.samples[*row].payload, data_.modality, options_.thumbnail);
    res.set_content(io::encode_png_rgb(img.h, img.w, img.px), "image/png");
  });

  s.Get(R"(/api/samples/([^/]+)/overlay)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string sid = req.matches[1];
    auto row = data_.find(sid);
    if (!row) throw HttpError(404, "unknown sample '" + sid + "'");
    if (!req.has_param("artifact")) throw HttpError(422, "missing query parameter 'artifact'");
    const std::string id = req.get_param_value("artifact");
    if (!known_artifact(id)) throw HttpError(404, "unknown artifact '" + id + "'");
    auto cav = current_cav(id);
    if (!cav) throw HttpError(409, "artifact '" + id + "' has no CAV yet");
    const Sample& sample = data_.samples[*row];
    LayerSplit split(model_, cav->layer);
    LocalizationResult loc = localize(*cav, split, batch_of(sample));
    Rgb img = render_sample(sample.payload, data_.modality, options_.thumbnail);
    blend_heatmap(img, loc.heatmap);
    res.set_content(io::encode_png_rgb(img.h, img.w, img.px), "image/png");
  });

  // Train-split rows of one class.
  auto class_rows = [this](std::size_t cls, std::vector<std::string>& ids) {
    if (cls >= data_.num_classes()) throw HttpError(422, "class " + std::to_string(cls) + " out of range");
    std::vector<std::size_t> rows;
    for (std::size_t r : train_rows_) {
      if (data_.samples[r].label == cls) {
        rows.push_back(r);
        ids.push_back(data_.samples[r].id);
      }
    }
    return data_.training_set(rows).inputs;
  };
  auto default_class = [this]() -> std::size_t {
    return data_.artifacts.empty() ? 0 : data_.artifacts.front().value("target_class", std::size_t{0});
  };

  s.Get("/api/reveal/embedding", [=, this](const httplib::Request& req, httplib::Response& res) {
    const std::string view = req.has_param("view") ? req.get_param_value("view") : "data";
    if (view != "data" && view != "model") throw HttpError(422, "view must be 'data' or 'model'");
    const std::string layer = req.has_param("layer") ? req.get_param_value("layer") : "";
    if (!layer.empty() && !model_.has_layer(layer)) throw HttpError(404, "unknown layer '" + layer + "'");
    const std::size_t cls = query_size(req, "class", default_class());
    const std::string key = view + "|" + layer + "|" + std::to_string(cls);
    {
      std::lock_guard lock(cache_mutex_);
      auto it = view_cache_.find(key);
      if (it != view_cache_.end()) return send_json(res, it->second);
    }
    std::vector<std::string> ids;
    Tensor x = class_rows(cls, ids);
    json out = {{"view", view}, {"class", cls}};
    if (view == "data") {
      // Input heatmaps by default, pooled latent relevance at a given layer.
      Tensor vectors;
      if (layer.empty()) {
        Tensor heat = channel_summed(attribute(model_, x, cls).input);
        vectors = heat.reshaped({heat.dim(0), heat.size() / heat.dim(0)});
      } else {
        vectors = latent_features(model_, layer, x, FeatureSpace::Relevance, cls);
      }
      SprayResult sp = spray(vectors, std::min(options_.clusters, ids.size()));
      out["layer"] = layer.empty() ? json("input") : json(layer);
      out["sample_ids"] = ids;
      out["embedding"] = to_json(sp.embedding);
      out["clusters"] = to_json(sp.clusters);
    } else {
      const std::string l = layer.empty() ? options_.layer : layer;
      ConceptEmbedding ce = concept_embedding(latent_features(model_, l, x));
      out["layer"] = l;
      out["concepts"] = to_json(ce);
    }
    std::lock_guard lock(cache_mutex_);
    view_cache_[key] = out;
    send_json(res, out);
  });

  s.Get(R"(/api/artifacts/([^/]+)/prototypes)", [=, this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (!known_artifact(id)) throw HttpError(404, "unknown artifact '" + id + "'");
    const std::size_t cls = query_size(req, "class", dataset_artifact(data_, id).target_class);
    auto cav = current_cav(id);
    const std::string layer = cav ? cav->layer : options_.layer;
    const std::string key = "pcx|" + layer + "|" + std::to_string(cls);
    {
      std::lock_guard lock(cache_mutex_);
      auto it = view_cache_.find(key);
      if (it != view_cache_.end()) return send_json(res, it->second);
    }
    std::vector<std::string> ids;
    Tensor x = class_rows(cls, ids);
    const std::size_t k = std::max<std::size_t>(1, std::min(options_.prototypes, ids.size() / 5));
    PrototypeSet p = pcx(latent_features(model_, layer, x, FeatureSpace::Relevance, cls), k, 0, cls);
    json out = to_json(p);
    out["layer"] = layer;
    for (std::size_t i = 0; i < p.prototypes.size(); ++i) {
      json members = json::array();
      for (std::size_t r : p.prototypes[i].covered) members.push_back(ids[r]);
      out["prototypes"][i]["sample_ids"] = members;
    }
    std::lock_guard lock(cache_mutex_);
    view_cache_[key] = out;
    send_json(res, out);
  });

  s.Post("/api/annotations", [this](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception& e) {
      throw HttpError(422, std::string("malformed JSON: ") + e.what());
    }
    AnnotationRecord r;
    try {
      r = annotation_from_json(body);
    } catch (const std::exception& e) {
      throw HttpError(422, e.what());
    }
    if (!data_.find(r.sample_id)) throw HttpError(404, "unknown sample '" + r.sample_id + "'");
    if (!known_artifact(r.artifact_id)) throw HttpError(404, "unknown artifact '" + r.artifact_id + "'");
    if (!body.contains("iteration")) {
      auto cav = current_cav(r.artifact_id);
      r.iteration = cav ? cav->iteration : 0;
    }
    send_json(res, to_json(store_.append(r)), 201);
  });

  s.Post(R"(/api/artifacts/([^/]+)/refit)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (!known_artifact(id)) throw HttpError(404, "unknown artifact '" + id + "'");
    json body = json::object();
    if (!req.body.empty()) {
      try {
        body = json::parse(req.body);
      } catch (const json::exception& e) {
        throw HttpError(422, std::string("malformed JSON: ") + e.what());
      }
      if (!body.is_object()) throw HttpError(422, "refit body must be a JSON object");
    }
    RefitJob job = launch_refit(id, body);
    res.set_header("Location", "/api/jobs/" + job.id);
    send_json(res, to_json(job), 202);
  });

  s.Get(R"(/api/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    std::lock_guard lock(job_mutex_);
    auto it = jobs_.find(req.matches[1]);
    if (it == jobs_.end()) throw HttpError(404, "unknown job '" + std::string(req.matches[1]) + "'");
    send_json(res, to_json(it->second));
  });

  s.Get("/api/export/annotations", [this](const httplib::Request&, httplib::Response& res) {
    std::ostringstream out;
    store_.export_jsonl(out);
    res.set_content(out.str(), "application/x-ndjson");
  });
}

}  // namespace shortcut
