#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "shortcut/annotations.hpp"
#include "shortcut/bias_model.hpp"
#include "shortcut/dataset.hpp"
#include "shortcut/model.hpp"
#include "shortcut/project.hpp"
#include "shortcut/retrieval.hpp"

namespace httplib {
class Server;
}

namespace shortcut {

struct ServiceOptions {
  ProjectPaths project;
  std::string model = "vanilla";
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t page_size = 20;
  std::size_t thumbnail = 128;
  std::size_t prototypes = 3;
  std::size_t clusters = 3;
  // CAV fitted by refit jobs.
  std::string layer = "pool3";
  CavMethod method = CavMethod::Svm;
  FeatureSpace space = FeatureSpace::Activation;
  std::optional<std::size_t> target_class;
  SvmOptions svm;
  // Runs on the job thread before each fit (tests use it to hold a job open).
  std::function<void(const std::string& artifact_id)> before_refit;
};

// Reads [service] and [cav] from the project configuration.
ServiceOptions service_options(const ProjectPaths& project, const Config& c);

enum class JobState { Queued, Running, Done, Failed };
std::string to_string(JobState s);

struct RefitJob {
  std::string id;
  std::string artifact_id;
  JobState state = JobState::Queued;
  std::optional<std::size_t> iteration;
  std::string error;
  nlohmann::json metrics = nlohmann::json::object();
};
nlohmann::json to_json(const RefitJob& j);

// Annotation backend over one project directory. Handlers run on the HTTP
// server's worker threads; refits run on a background thread each, at most
// one per artifact.
class Service {
 public:
  explicit Service(ServiceOptions options);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Binds and serves on a background thread. Port 0 picks a free port;
  // returns the bound port.
  int start();
  // Serves on the calling thread until stop() is called from another one.
  void run();
  void stop();
  int port() const { return port_; }

  AnnotationStore& store() { return store_; }
  const Dataset& dataset() const { return data_; }
  // Blocks until the job is terminal; nullopt for an unknown id.
  std::optional<RefitJob> wait_for_job(const std::string& job_id);

 private:
  int bind();
  void routes();
  bool known_artifact(const std::string& id) const;
  std::optional<ConceptVector> current_cav(const std::string& artifact_id) const;
  std::shared_ptr<const BiasScoreTable> scores(const ConceptVector& cav);
  RefitJob launch_refit(const std::string& artifact_id, const nlohmann::json& body);
  void run_refit(std::string job_id, RefitRequest request);
  nlohmann::json artifact_summary(const std::string& id) const;

  ServiceOptions options_;
  Dataset data_;
  ClassifierModel model_;
  CavRegistry registry_;
  AnnotationStore store_;
  std::vector<std::size_t> train_rows_;
  std::vector<std::string> train_ids_;
  Tensor train_inputs_;

  std::unique_ptr<httplib::Server> server_;
  std::thread listener_;
  int port_ = 0;

  mutable std::mutex cache_mutex_;
  std::map<std::string, std::shared_ptr<const BiasScoreTable>> score_cache_;  // artifact@iteration
  std::map<std::string, nlohmann::json> view_cache_;

  mutable std::mutex job_mutex_;
  std::condition_variable job_done_;
  std::map<std::string, RefitJob> jobs_;
  std::map<std::string, std::string> active_;  // artifact -> job id
  std::vector<std::thread> workers_;
  std::size_t next_job_ = 1;
};

}  // namespace shortcut
