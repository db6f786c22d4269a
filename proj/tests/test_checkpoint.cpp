#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fpg/checkpoint.hpp"

namespace fpg {
namespace {

namespace fs = std::filesystem;

SearchConfig tiny_config() {
  SearchConfig c;
  c.input = 32;
  c.keypoints = 2;
  c.epochs = 2;
  c.batch_size = 4;
  c.seed = 3;
  c.train_samples = 8;
  c.val_samples = 8;
  c.test_samples = 4;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fpg_ckpt_" + name);
  fs::remove_all(p);
  return p;
}

void expect_same_state(const Searcher& a, const Searcher& b) {
  ASSERT_EQ(a.network().params.size(), b.network().params.size());
  for (ParamId i = 0; i < a.network().params.size(); ++i)
    EXPECT_EQ(*a.network().params[i].value, *b.network().params[i].value)
        << a.network().params[i].name;
  EXPECT_EQ(a.gates().alpha, b.gates().alpha);
  EXPECT_EQ(a.gates().fusion_logits, b.gates().fusion_logits);
  EXPECT_EQ(a.gates().epsilon, b.gates().epsilon);
  EXPECT_EQ(a.step(), b.step());
  ASSERT_EQ(a.history().size(), b.history().size());
  for (std::size_t e = 0; e < a.history().size(); ++e)
    EXPECT_EQ(history_line(a.history()[e]), history_line(b.history()[e]));
  EXPECT_EQ(a.weight_optimizer().first_moments(), b.weight_optimizer().first_moments());
  EXPECT_EQ(a.alpha_optimizer().second_moments(), b.alpha_optimizer().second_moments());
}

TEST(Checkpoint, ResumeIsBitIdentical) {
  for (Bilevel mode : {Bilevel::alternating, Bilevel::joint}) {
    SearchConfig c = tiny_config();
    c.bilevel = mode;
    Searcher straight(c);
    straight.run();

    // Stop mid-epoch, on an epoch boundary and inside the last epoch.
    for (int stop : {1, 2, 3}) {
      const fs::path dir = scratch(bilevel_name(mode));
      {
        Searcher first(c);
        for (int i = 0; i < stop; ++i) first.search_step();
        save_checkpoint(first, dir.string());
      }
      Searcher resumed = resume_search(dir.string());
      EXPECT_EQ(resumed.step(), stop);
      resumed.run();
      expect_same_state(straight, resumed);
      EXPECT_EQ(export_genome(straight.derive()), export_genome(resumed.derive()));
      fs::remove_all(dir);
    }
  }
}

TEST(Checkpoint, SaveLoadRoundTripAndGates) {
  SearchConfig c = tiny_config();
  Searcher s(c);
  s.run_epoch();
  const fs::path dir = scratch("roundtrip");
  save_checkpoint(s, dir.string());
  EXPECT_TRUE(fs::exists(dir / kManifestName));
  EXPECT_TRUE(fs::exists(dir / kBlobName));
  EXPECT_EQ(dump_config(checkpoint_config(dir.string())), dump_config(s.config()));
  Searcher t(checkpoint_config(dir.string()));
  load_checkpoint(t, dir.string());
  expect_same_state(s, t);
  const CheckpointGates g = load_checkpoint_gates(dir.string());
  EXPECT_EQ(g.gates.alpha, s.gates().alpha);
  EXPECT_EQ(g.gates.step, s.step());
  EXPECT_EQ(g.tau, tau_schedule(s.schedules(), s.step()));
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptionIsReportedAsDataError) {
  SearchConfig c = tiny_config();
  Searcher s(c);
  const fs::path dir = scratch("corrupt");
  save_checkpoint(s, dir.string());

  const auto blob = dir / kBlobName;
  const auto size = fs::file_size(blob);
  fs::resize_file(blob, size - 8);
  EXPECT_THROW(resume_search(dir.string()), DataError);
  fs::resize_file(blob, size + 8);
  EXPECT_THROW(resume_search(dir.string()), DataError);

  std::ofstream(dir / kManifestName) << "{\"version\": 1, \"config\": ";
  EXPECT_THROW(checkpoint_config(dir.string()), DataError);
  EXPECT_THROW(load_checkpoint_gates(dir.string()), DataError);
  std::ofstream(dir / kManifestName) << "{\"version\": 99}";
  EXPECT_THROW(resume_search(dir.string()), DataError);
  EXPECT_THROW(resume_search((dir / "missing").string()), DataError);

  // A checkpoint of a different layout does not load into this searcher.
  save_checkpoint(s, dir.string());
  SearchConfig other = c;
  other.keypoints = 3;
  Searcher t(other);
  EXPECT_THROW(load_checkpoint(t, dir.string()), DataError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace fpg
