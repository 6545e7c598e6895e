#pragma once

#include <stdexcept>
#include <string>

namespace flowkd {

enum class Err {
  BadMagic,
  TruncatedFile,
  SpriteTooLarge,
  SequenceTooShort,
  CountMismatch,
  UnreadableFile,
  ShapeMismatch,
  IndexOutOfRange,
  ArchMismatch,
  NonFiniteOutput,
  MissingFlow,
  UnknownLayer,
  VersionMismatch,
  CorruptFile,
  GeometryMismatch,
  NonFinite,
  MissingCheckpoint,
  DivergedLoss,
  CacheCorrupt,
  CacheMiss,
  LengthMismatch,
  ConfigInvalid,
  DependencyMissing,
};

inline const char* err_name(Err e) {
  switch (e) {
    case Err::BadMagic: return "BadMagic";
    case Err::TruncatedFile: return "TruncatedFile";
    case Err::SpriteTooLarge: return "SpriteTooLarge";
    case Err::SequenceTooShort: return "SequenceTooShort";
    case Err::CountMismatch: return "CountMismatch";
    case Err::UnreadableFile: return "UnreadableFile";
    case Err::ShapeMismatch: return "ShapeMismatch";
    case Err::IndexOutOfRange: return "IndexOutOfRange";
    case Err::ArchMismatch: return "ArchMismatch";
    case Err::NonFiniteOutput: return "NonFiniteOutput";
    case Err::MissingFlow: return "MissingFlow";
    case Err::UnknownLayer: return "UnknownLayer";
    case Err::VersionMismatch: return "VersionMismatch";
    case Err::CorruptFile: return "CorruptFile";
    case Err::GeometryMismatch: return "GeometryMismatch";
    case Err::NonFinite: return "NonFinite";
    case Err::MissingCheckpoint: return "MissingCheckpoint";
    case Err::DivergedLoss: return "DivergedLoss";
    case Err::CacheCorrupt: return "CacheCorrupt";
    case Err::CacheMiss: return "CacheMiss";
    case Err::LengthMismatch: return "LengthMismatch";
    case Err::ConfigInvalid: return "ConfigInvalid";
    case Err::DependencyMissing: return "DependencyMissing";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& msg)
      : std::runtime_error(std::string(err_name(code)) + ": " + msg), code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, Err code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace flowkd
