#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "mass/sha256.hpp"
#include "mass/store.hpp"
#include "mass/trainer.hpp"

using namespace mass;

TEST_CASE("sha256 test vectors", "[store]") {
  REQUIRE(Sha256::hash_hex("") ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  REQUIRE(Sha256::hash_hex("abc") ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  REQUIRE(Sha256::hash_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
  // multi-block message
  REQUIRE(Sha256::hash_hex(std::string(1000, 'a')) ==
          "41edece42d63e8d9bf515a9ba6932e1c20cbc9f5a5d134645adb5db1b9737ea3");
}

namespace {

RunResult tiny_run(uint64_t seed) {
  TrainConfig cfg;
  cfg.steps_per_phase = 120;
  cfg.batch = 32;
  cfg.eval_batch = 128;
  cfg.dump_batch = 64;
  cfg.width = 6;
  cfg.hidden = 2;
  std::vector<SystemId> cur = {SystemId::kSho, SystemId::kPendulum};
  return run_curriculum(cfg, cur, seed);
}

}  // namespace

TEST_CASE("run records round-trip", "[store]") {
  fs::path dir = fs::temp_directory_path() / "mass_store_roundtrip";
  fs::remove_all(dir);
  RunResult run = tiny_run(9);
  save_run(run, dir);

  RunRecord rec = load_run(dir);
  REQUIRE(rec.seed == 9);
  REQUIRE(rec.curriculum == run.curriculum);
  REQUIRE(rec.phases == 2);
  REQUIRE(rec.theta[1] == run.phases[1].theta);
  REQUIRE(rec.theta_ema[0] == run.phases[0].theta_ema);
  REQUIRE(rec.act_dumps[1][1] == run.phases[1].act_dumps[1]);
  REQUIRE(rec.config.steps_per_phase == 120);
  REQUIRE(rec.correct_flags.size() == 2);

  // saving the same run twice produces identical manifests
  fs::path dir2 = fs::temp_directory_path() / "mass_store_roundtrip2";
  fs::remove_all(dir2);
  save_run(run, dir2);
  REQUIRE(read_text_file(dir / "manifest.txt") == read_text_file(dir2 / "manifest.txt"));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("corruption is detected and names the file", "[store]") {
  fs::path dir = fs::temp_directory_path() / "mass_store_corrupt";
  fs::remove_all(dir);
  save_run(tiny_run(4), dir);

  // flip one byte in a parameter snapshot
  fs::path victim = dir / "phase_00" / "params.f64";
  std::string body = read_text_file(victim);
  body[8] = static_cast<char>(body[8] ^ 0x40);
  write_text_file(victim, body);

  try {
    load_run(dir);
    FAIL("expected CorruptRecord");
  } catch (const CorruptRecord& e) {
    REQUIRE(std::string(e.what()).find("params.f64") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("missing artifacts and non-records are loud", "[store]") {
  fs::path dir = fs::temp_directory_path() / "mass_store_missing";
  fs::remove_all(dir);
  save_run(tiny_run(4), dir);
  fs::remove(dir / "phase_01" / "params_ema.f64");
  REQUIRE_THROWS_AS(load_run(dir), MissingArtifact);
  fs::remove_all(dir);

  fs::create_directories(dir);
  REQUIRE_THROWS_AS(load_run(dir), NotARunRecord);
  fs::remove_all(dir);
}

TEST_CASE("version and catalog mismatches are rejected", "[store]") {
  fs::path dir = fs::temp_directory_path() / "mass_store_version";
  fs::remove_all(dir);
  save_run(tiny_run(4), dir);

  std::string manifest = read_text_file(dir / "manifest.txt");
  std::string hacked = manifest;
  size_t pos = hacked.find("mass-run/1");
  hacked.replace(pos, 10, "mass-run/9");
  write_text_file(dir / "manifest.txt", hacked);
  REQUIRE_THROWS_AS(load_run(dir), IncompatibleRecord);

  hacked = manifest;
  pos = hacked.find("catalog_hash = ");
  hacked[pos + 15] = hacked[pos + 15] == 'f' ? '0' : 'f';
  write_text_file(dir / "manifest.txt", hacked);
  REQUIRE_THROWS_AS(load_run(dir), IncompatibleRecord);
  fs::remove_all(dir);
}

TEST_CASE("reloaded snapshots reproduce stored evaluation MSE", "[store]") {
  fs::path dir = fs::temp_directory_path() / "mass_store_replay";
  fs::remove_all(dir);
  RunResult run = tiny_run(12);
  save_run(run, dir);
  RunRecord rec = load_run(dir);

  for (int p = 0; p < rec.phases; ++p) {
    std::span<const SystemId> active(rec.curriculum.data(), static_cast<size_t>(p) + 1);
    LossGraph g = build_loss_graph(rec.layout, active, rec.theta_ema[p], rec.config,
                                   rec.config.dump_batch, false);
    for (int j = 0; j <= p; ++j) {
      Rng er(eval_batch_seed(rec.curriculum[j]));
      Batch eb = sample_batch(system_spec(rec.curriculum[j]), rec.config.eval_batch, er);
      EvalResult res = eval_mse(g, j, eb);
      REQUIRE_THAT(res.mse(),
                   Catch::Matchers::WithinAbs(run.phases[p].eval_mse[j], 1e-9));
      // replayed analyses see bit-identical activations
      auto dump = dump_activations(g, j, eb, rec.config.dump_batch);
      REQUIRE(dump == rec.act_dumps[p][j]);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("metrics traces are readable back", "[store]") {
  fs::path dir = fs::temp_directory_path() / "mass_store_metrics";
  fs::remove_all(dir);
  RunResult run = tiny_run(2);
  save_run(run, dir);
  MetricsTrace tr = load_metrics(dir, 0);
  REQUIRE(tr.loss.size() == run.phases[0].loss_trace.size());
  REQUIRE(tr.loss[5] == run.phases[0].loss_trace[5]);
  REQUIRE(tr.sig_count[10] == run.phases[0].sig_count_trace[10]);
  fs::remove_all(dir);
}
