#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>

#include "pandora/pbf.hpp"
#include "pandora/pov.hpp"

namespace pandora::corpus {

// Challenge sources and reference POVs, embedded at build time from corpus/
// so the tool can rebuild the set anywhere.

struct ChallengeSpec {
  std::string name;
  std::string vuln_class;
  const char* source;   // assembly text
  const char* ref_pov;  // nullptr when the challenge ships no reference POV
};

std::span<const ChallengeSpec> challenges();
const ChallengeSpec* find_challenge(std::string_view name);

/// Assembles one challenge by name. Throws std::out_of_range for an unknown
/// name; assembler errors surface as AsmError.
pbf::PandoraBinary build_challenge(std::string_view name);

struct BuiltCorpus {
  std::map<std::string, pbf::PandoraBinary> binaries;
  std::map<std::string, pov::PovScript> ref_povs;
};

/// Builds every challenge and parses every reference POV.
BuiltCorpus build_corpus();

/// Expected test constants (offsets, regnum, dialog bytes) per challenge.
const char* manifest_json();

/// Writes sources, reference POVs, assembled .pbf images and the manifest.
void write_corpus(const std::filesystem::path& dir);

}  // namespace pandora::corpus
