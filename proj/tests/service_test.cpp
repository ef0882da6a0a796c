#include <gtest/gtest.h>

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <future>
#include <sstream>
#include <thread>

#include "planted.hpp"
#include "shortcut/artifact.hpp"
#include "shortcut/service.hpp"

using namespace shortcut;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path& project_root() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "shortcut_service_test";
    fs::remove_all(p);
    SynthConfig c;
    c.samples_per_class = 60;
    c.shape = {1, 24, 24};
    c.seed = 4;
    ArtifactSpec spec;
    spec.id = "patch";
    spec.rate = 0.5;
    Dataset d = inject(generate_synthetic(c), spec, 2);
    ProjectPaths paths{p};
    write_dataset(d, paths.dataset());
    save_checkpoint(shortcut::testing::planted_detector_model(dataset_artifact(d, "patch"), 24), paths.model());
    return p;
  }();
  return root;
}

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    ProjectPaths paths{project_root()};
    fs::remove(paths.annotations());
    fs::remove_all(paths.cavs());
    ServiceOptions o;
    o.project = paths;
    o.port = 0;
    o.layer = "relu";
    o.clusters = 2;
    o.prototypes = 2;
    o.before_refit = [this](const std::string&) {
      std::unique_lock lock(hold_mutex);
      hold_cv.wait(lock, [this] { return !hold; });
    };
    service = std::make_unique<Service>(o);
    client = std::make_unique<httplib::Client>("127.0.0.1", service->start());
    truth = service->dataset().annotations.at("patch");
  }

  void TearDown() override {
    release();
    client.reset();
    service.reset();
  }

  void release() {
    {
      std::lock_guard lock(hold_mutex);
      hold = false;
    }
    hold_cv.notify_all();
  }

  httplib::Result post_label(const std::string& sid, int label, const std::string& source = "manual") {
    json body = {{"sample_id", sid}, {"artifact_id", "patch"}, {"label", label}, {"source", source}};
    return client->Post("/api/annotations", body.dump(), "application/json");
  }

  std::vector<std::string> train_ids(int label, Split split = Split::Train) const {
    std::vector<std::string> out;
    for (const Sample& s : service->dataset().samples) {
      auto it = truth.find(s.id);
      const int t = it == truth.end() ? 0 : it->second;
      if (s.split == split && t == label) out.push_back(s.id);
    }
    return out;
  }

  json refit_and_wait() {
    auto r = client->Post("/api/artifacts/patch/refit", "", "application/json");
    EXPECT_EQ(r->status, 202);
    const std::string jid = json::parse(r->body)["id"];
    service->wait_for_job(jid);
    return json::parse(client->Get("/api/jobs/" + jid)->body);
  }

  void seed(std::size_t n) {
    auto pos = train_ids(1), neg = train_ids(0);
    for (std::size_t i = 0; i < n; ++i) {
      ASSERT_EQ(post_label(pos[i], 1, "seed")->status, 201);
      ASSERT_EQ(post_label(neg[i], 0, "seed")->status, 201);
    }
  }

  json queue(const std::string& query = "") {
    auto r = client->Get("/api/artifacts/patch/queue" + query);
    EXPECT_EQ(r->status, 200) << r->body;
    return json::parse(r->body);
  }

  std::unique_ptr<Service> service;
  std::unique_ptr<httplib::Client> client;
  std::map<std::string, int> truth;
  std::mutex hold_mutex;
  std::condition_variable hold_cv;
  bool hold = false;
};

std::pair<std::uint32_t, std::uint32_t> png_size(const std::string& body) {
  auto be = [&](std::size_t at) {
    return (std::uint32_t(std::uint8_t(body[at])) << 24) | (std::uint32_t(std::uint8_t(body[at + 1])) << 16) |
           (std::uint32_t(std::uint8_t(body[at + 2])) << 8) | std::uint32_t(std::uint8_t(body[at + 3]));
  };
  return {be(16), be(20)};
}

}  // namespace

TEST_F(ServiceTest, ListsDatasetAndArtifacts) {
  auto d = json::parse(client->Get("/api/datasets")->body);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0]["artifacts"], json::array({"patch"}));
  EXPECT_EQ(d[0]["splits"]["train"], 96);
  auto a = json::parse(client->Get("/api/artifacts")->body);
  EXPECT_EQ(a[0]["id"], "patch");
  EXPECT_EQ(a[0]["iteration"], 0);
  EXPECT_TRUE(a[0]["auc"].is_null());
}

TEST_F(ServiceTest, QueueNeedsACav) {
  EXPECT_EQ(client->Get("/api/artifacts/patch/queue")->status, 409);
  EXPECT_EQ(client->Get("/api/artifacts/nope/queue")->status, 404);
}

TEST_F(ServiceTest, AnnotationStatusCodes) {
  const std::string sid = service->dataset().samples[0].id;
  EXPECT_EQ(client->Post("/api/annotations", "{not json", "application/json")->status, 422);
  EXPECT_EQ(client->Post("/api/annotations", json({{"sample_id", sid}, {"artifact_id", "patch"}, {"label", 2}}).dump(),
                         "application/json")->status, 422);
  EXPECT_EQ(client->Post("/api/annotations", json({{"sample_id", sid}, {"artifact_id", "patch"}}).dump(),
                         "application/json")->status, 422);
  EXPECT_EQ(post_label("no-such-sample", 1)->status, 404);
  EXPECT_EQ(client->Post("/api/annotations", json({{"sample_id", sid}, {"artifact_id", "nope"}, {"label", 1}}).dump(),
                         "application/json")->status, 404);
  auto ok = post_label(sid, 1);
  ASSERT_EQ(ok->status, 201);
  auto rec = json::parse(ok->body);
  EXPECT_EQ(rec["sample_id"], sid);
  EXPECT_EQ(rec["source"], "manual");
  EXPECT_GT(rec["timestamp"].get<std::uint64_t>(), 0u);
  EXPECT_EQ(service->store().size(), 1u);
}

TEST_F(ServiceTest, RefitWithFewPositivesFails) {
  auto pos = train_ids(1), neg = train_ids(0);
  for (int i = 0; i < 4; ++i) post_label(pos[i], 1, "seed");
  for (int i = 0; i < 8; ++i) post_label(neg[i], 0, "seed");
  json job = refit_and_wait();
  EXPECT_EQ(job["state"], "failed");
  EXPECT_NE(job["error"].get<std::string>().find("insufficient labels"), std::string::npos);
  EXPECT_EQ(json::parse(client->Get("/api/artifacts")->body)[0]["iteration"], 0);
}

TEST_F(ServiceTest, RefitThenLabeledSamplesLeaveTheQueue) {
  seed(5);
  json job = refit_and_wait();
  ASSERT_EQ(job["state"], "done") << job.dump();
  EXPECT_EQ(job["iteration"], 1);

  json q = queue("?size=500");
  EXPECT_EQ(q["iteration"], 1);
  EXPECT_EQ(q["total"], 96 - 10);  // labeled positives and negatives are both excluded
  const std::string head = q["items"][0]["sample_id"];
  EXPECT_EQ(truth[head], 1);  // the planted detector ranks a poisoned sample first
  ASSERT_EQ(post_label(head, 1)->status, 201);
  json after = queue("?size=500");
  EXPECT_EQ(after["total"], 96 - 11);
  for (const auto& item : after["items"]) EXPECT_NE(item["sample_id"], head);
  EXPECT_EQ(after["items"][0]["thumbnail"], "/api/samples/" + after["items"][0]["sample_id"].get<std::string>() + "/thumbnail");
}

TEST_F(ServiceTest, QueueCanKeepNegatives) {
  seed(5);
  ASSERT_EQ(refit_and_wait()["state"], "done");
  EXPECT_EQ(queue("?size=500&exclude_negatives=false")["total"], 96 - 5);
}

TEST_F(ServiceTest, PagesAreOrderedSlices) {
  seed(5);
  ASSERT_EQ(refit_and_wait()["state"], "done");
  json all = queue("?size=500");
  json p0 = queue("?size=7&page=0"), p1 = queue("?size=7&page=1");
  EXPECT_EQ(p0["pages"], (86 + 6) / 7);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(p0["items"][i]["sample_id"], all["items"][i]["sample_id"]);
    EXPECT_EQ(p1["items"][i]["sample_id"], all["items"][7 + i]["sample_id"]);
  }
  for (std::size_t i = 1; i < all["items"].size(); ++i) {
    EXPECT_GE(all["items"][i - 1]["score"].get<double>(), all["items"][i]["score"].get<double>());
  }
  EXPECT_EQ(client->Get("/api/artifacts/patch/queue?size=0")->status, 422);
  EXPECT_EQ(client->Get("/api/artifacts/patch/queue?page=-1")->status, 422);
  EXPECT_EQ(client->Get("/api/artifacts/patch/queue?iteration=9")->status, 404);
}

TEST_F(ServiceTest, OldIterationsStayReadable) {
  seed(5);
  ASSERT_EQ(refit_and_wait()["state"], "done");
  json first = queue("?size=500");
  auto pos = train_ids(1);
  for (int i = 5; i < 10; ++i) post_label(pos[i], 1);
  ASSERT_EQ(refit_and_wait()["iteration"], 2);
  EXPECT_EQ(queue()["iteration"], 2);
  json again = queue("?size=500&iteration=1");
  EXPECT_EQ(again["iteration"], 1);
  // Same ranking as before, minus the newly labeled samples.
  std::vector<std::string> expected;
  for (const auto& item : first["items"]) {
    const std::string sid = item["sample_id"];
    if (std::find(pos.begin() + 5, pos.begin() + 10, sid) == pos.begin() + 10) expected.push_back(sid);
  }
  std::vector<std::string> got;
  for (const auto& item : again["items"]) got.push_back(item["sample_id"]);
  EXPECT_EQ(got, expected);
}

TEST_F(ServiceTest, SecondRefitWhileRunningConflicts) {
  seed(5);
  {
    std::lock_guard lock(hold_mutex);
    hold = true;
  }
  auto first = client->Post("/api/artifacts/patch/refit", "", "application/json");
  ASSERT_EQ(first->status, 202);
  EXPECT_EQ(client->Post("/api/artifacts/patch/refit", "", "application/json")->status, 409);
  // Labels are still accepted while the job runs.
  EXPECT_EQ(post_label(train_ids(1)[7], 1)->status, 201);
  release();
  const std::string jid = json::parse(first->body)["id"];
  EXPECT_EQ(service->wait_for_job(jid)->state, JobState::Done);
  EXPECT_EQ(client->Post("/api/artifacts/patch/refit", "", "application/json")->status, 202);
}

TEST_F(ServiceTest, HeldOutGroundTruthIsScoredNotFitted) {
  seed(5);
  for (const auto& sid : train_ids(1, Split::Val)) post_label(sid, 1, "ground-truth");
  for (const auto& sid : train_ids(0, Split::Val)) post_label(sid, 0, "ground-truth");
  json job = refit_and_wait();
  ASSERT_EQ(job["state"], "done");
  EXPECT_EQ(job["metrics"]["positive"], 5);
  EXPECT_EQ(job["metrics"]["negative"], 5);
  EXPECT_DOUBLE_EQ(job["metrics"]["auc"].get<double>(), 1.0);
  auto a = json::parse(client->Get("/api/artifacts")->body);
  EXPECT_DOUBLE_EQ(a[0]["auc"].get<double>(), 1.0);
}

TEST_F(ServiceTest, UnknownIds) {
  EXPECT_EQ(client->Get("/api/jobs/job-999")->status, 404);
  EXPECT_EQ(client->Post("/api/artifacts/nope/refit", "", "application/json")->status, 404);
  EXPECT_EQ(client->Get("/api/samples/nope/thumbnail")->status, 404);
  EXPECT_EQ(client->Get("/api/artifacts/nope/prototypes")->status, 404);
}

TEST_F(ServiceTest, ThumbnailAndOverlayArePngs) {
  const std::string sid = service->dataset().samples[0].id;
  auto t = client->Get("/api/samples/" + sid + "/thumbnail");
  ASSERT_EQ(t->status, 200);
  EXPECT_EQ(t->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(t->body.substr(1, 3), "PNG");
  EXPECT_EQ(png_size(t->body), std::make_pair(128u, 128u));
  EXPECT_EQ(client->Get("/api/samples/" + sid + "/overlay?artifact=patch")->status, 409);
  seed(5);
  ASSERT_EQ(refit_and_wait()["state"], "done");
  auto o = client->Get("/api/samples/" + sid + "/overlay?artifact=patch");
  ASSERT_EQ(o->status, 200);
  EXPECT_EQ(png_size(o->body), std::make_pair(128u, 128u));
  EXPECT_NE(o->body, t->body);
  EXPECT_EQ(client->Get("/api/samples/" + sid + "/overlay")->status, 422);
}

TEST_F(ServiceTest, EmbeddingViews) {
  auto d = client->Get("/api/reveal/embedding?view=data&class=1");
  ASSERT_EQ(d->status, 200) << d->body;
  json dj = json::parse(d->body);
  std::size_t class1 = 0;
  for (std::size_t r : service->dataset().indices(Split::Train)) class1 += service->dataset().samples[r].label == 1;
  EXPECT_EQ(dj["sample_ids"].size(), class1);
  EXPECT_EQ(dj["clusters"]["labels"].size(), class1);
  auto m = client->Get("/api/reveal/embedding?view=model&layer=relu");
  ASSERT_EQ(m->status, 200) << m->body;
  EXPECT_TRUE(json::parse(m->body)["concepts"].contains("lof"));
  EXPECT_EQ(client->Get("/api/reveal/embedding?view=other")->status, 422);
  EXPECT_EQ(client->Get("/api/reveal/embedding?view=model&layer=nope")->status, 404);
}

TEST_F(ServiceTest, Prototypes) {
  auto r = client->Get("/api/artifacts/patch/prototypes?class=1");
  ASSERT_EQ(r->status, 200) << r->body;
  json p = json::parse(r->body);
  EXPECT_EQ(p["prototypes"].size(), 2u);
  std::size_t covered = 0;
  for (const auto& q : p["prototypes"]) covered += q["sample_ids"].size();
  EXPECT_EQ(covered, 48u);
  EXPECT_EQ(client->Get("/api/artifacts/patch/prototypes?class=7")->status, 422);
}

TEST_F(ServiceTest, ExportMatchesStore) {
  seed(3);
  auto r = client->Get("/api/export/annotations");
  ASSERT_EQ(r->status, 200);
  std::istringstream in(r->body);
  AnnotationStore copy;
  EXPECT_EQ(copy.import_jsonl(in), 6u);
  EXPECT_EQ(copy.labels("patch"), service->store().labels("patch"));
}

TEST_F(ServiceTest, StoreSurvivesRestart) {
  seed(2);
  const auto before = service->store().labels("patch");
  client.reset();
  service.reset();
  ServiceOptions o;
  o.project = ProjectPaths{project_root()};
  o.port = 0;
  o.layer = "relu";
  Service again(o);
  EXPECT_EQ(again.store().labels("patch"), before);
}
