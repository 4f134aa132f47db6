#pragma once

// Symbols defined by the build-generated corpus_data.cpp (see
// src/corpus_data.cpp.in); contents mirror the corpus/ directory.

namespace pandora::corpus::data {

extern const char* const greeter_pasm;
extern const char* const counter_pasm;
extern const char* const leaky_pasm;
extern const char* const dataabort_pasm;
extern const char* const greeter_ref_pov;
extern const char* const leaky_ref_pov;
extern const char* const manifest;

}  // namespace pandora::corpus::data
