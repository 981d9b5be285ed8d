#pragma once

#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "flat/bench.hpp"
#include "flat/data.hpp"
#include "flat/model.hpp"
#include "flat/train.hpp"

namespace flat {

// Layered option lookup: command-line flag > FLAT_* environment variable >
// config file (`key = value` lines, `#` comments) > built-in default.
class Options {
 public:
  void load_file(const std::string& path);
  void set_flag(const std::string& key, const std::string& value);
  std::optional<std::string> raw(const std::string& key) const;

  std::string get(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  uint64_t get_u64(const std::string& key, uint64_t fallback) const;

  static std::string env_name(const std::string& key);

 private:
  std::map<std::string, std::string> flags_;
  std::map<std::string, std::string> file_;
};

ModelConfig model_config_from_options(const Options& opts);
TrainConfig train_config_from_options(const Options& opts);

// Model persistence: <prefix>.ckpt holds the parameter arrays and
// <prefix>.meta the config, tag scheme, vocabulary and lexicon.
void save_model_meta(const std::string& path, const ModelConfig& config,
                     const Pipeline& pipeline);

struct LoadedModel {
  ModelConfig config;
  Pipeline pipeline;
  std::unique_ptr<FlatModel> model;
};

LoadedModel load_model(const std::string& prefix);

// Entry point behind the `flat` binary; streams injected for testing.
int run_cli(int argc, const char* const* argv, std::istream& in,
            std::ostream& out, std::ostream& err);

}  // namespace flat
