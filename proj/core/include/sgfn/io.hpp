#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sgfn/certify.hpp"
#include "sgfn/config.hpp"
#include "sgfn/optimizer.hpp"
#include "sgfn/oracle.hpp"
#include "sgfn/policy.hpp"
#include "sgfn/trainer.hpp"

namespace sgfn {

inline constexpr int kCheckpointVersion = 1;

/// Everything needed to rebuild a trained model, its optimizer and the
/// trainer bookkeeping. Doubles round-trip bit-exactly through the JSON text.
struct Checkpoint {
  EnvSpec env;
  PolicyModel model;
  AdamOptimizer optimizer;
  std::uint64_t seed = 0;
  std::size_t round = 0;
  double c = 0.0;
  bool c_initialized = false;
  std::size_t patience_counter = 0;
  std::vector<std::pair<StateId, double>> buffer;
};

Checkpoint make_checkpoint(const Trainer& trainer, const EnvSpec& env);
std::string checkpoint_json(const Checkpoint& ck);
Checkpoint parse_checkpoint(const std::string& json_text);

void write_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::string& path);

std::string certificate_json(const CertificateReport& rep);
std::string eval_report_json(const EvalReport& rep);

/// One JSON object per line: states, log_pf, log_pb, reward, provenance, log_z.
void write_trajectories_jsonl(std::ostream& out, std::span<const Trajectory> taus, double log_z);

struct LoggedTrajectory {
  Trajectory tau;
  double log_z = 0.0;
};

std::vector<LoggedTrajectory> read_trajectories_jsonl(std::istream& in);

/// Writes text to path, creating parent directories.
void write_text_file(const std::string& path, const std::string& text);

}  // namespace sgfn
