// Copyright 2026 The kmsd Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kmsd {

/** Outcome of a certification: a verdict plus the numbers behind it. */
struct Report {
  std::string name;
  bool pass = false;
  double tol = 0.0;
  std::map<std::string, double> metrics;
  std::map<std::string, bool> checks;
  std::vector<std::string> notes;
  std::vector<Report> children;

  Report() = default;
  Report(std::string n, double t) : name(std::move(n)), tol(t) {}

  /** Records a sub-verdict and folds it into the overall verdict. */
  void require(const std::string& key, bool ok) {
    checks[key] = ok;
    if (!ok) pass = false;
  }

  const Report* child(const std::string& n) const {
    for (const auto& c : children)
      if (c.name == n) return &c;
    return nullptr;
  }

  double metric(const std::string& key) const {
    auto it = metrics.find(key);
    if (it == metrics.end())
      throw std::out_of_range("report '" + name + "' has no metric " + key);
    return it->second;
  }
};

enum class ErrorCode {
  InvalidArgument,
  DimensionMismatch,
  NotHermitian,
  NotPositiveDefinite,
  EmptyKrausList,
  NotPSD,
  WrongLevel,
  UnitalityViolated,
  NotHermiticityPreserving,
  InsufficientRange,
  PreconditionFailed,
  CertificationFailed,
  Infeasible,
  NotJFixed,
  NoConvergence,
  GramNotPSD,
  ReconstructionFailure,
  NonIntegralMultiplicity,
  DerivationRecoveryFailure,
  InconsistentPsi,
  GramMismatch,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NotHermitian: return "NotHermitian";
    case ErrorCode::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorCode::EmptyKrausList: return "EmptyKrausList";
    case ErrorCode::NotPSD: return "NotPSD";
    case ErrorCode::WrongLevel: return "WrongLevel";
    case ErrorCode::UnitalityViolated: return "UnitalityViolated";
    case ErrorCode::NotHermiticityPreserving: return "NotHermiticityPreserving";
    case ErrorCode::InsufficientRange: return "InsufficientRange";
    case ErrorCode::PreconditionFailed: return "PreconditionFailed";
    case ErrorCode::CertificationFailed: return "CertificationFailed";
    case ErrorCode::Infeasible: return "Infeasible";
    case ErrorCode::NotJFixed: return "NotJFixed";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::GramNotPSD: return "GramNotPSD";
    case ErrorCode::ReconstructionFailure: return "ReconstructionFailure";
    case ErrorCode::NonIntegralMultiplicity: return "NonIntegralMultiplicity";
    case ErrorCode::DerivationRecoveryFailure: return "DerivationRecoveryFailure";
    case ErrorCode::InconsistentPsi: return "InconsistentPsi";
    case ErrorCode::GramMismatch: return "GramMismatch";
  }
  return "Unknown";
}

/** Library error. Certification failures that abort an operation carry the failing report. */
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  Error(ErrorCode code, const std::string& what, Report report)
      : Error(code, what) {
    report_ = std::move(report);
    has_report_ = true;
  }

  ErrorCode code() const noexcept { return code_; }
  bool has_report() const noexcept { return has_report_; }
  const Report& report() const noexcept { return report_; }

 private:
  ErrorCode code_;
  Report report_;
  bool has_report_ = false;
};

}  // namespace kmsd
