// SPDX-License-Identifier: Apache-2.0
//
// Seeded generator for a small five-type NER corpus. Entity words are drawn
// from disjoint per-type lexicons and embedded in filler text.

#pragma once

#include <cstdint>
#include <vector>

#include "cllmfs/sft.hpp"

namespace cllmfs {

struct SyntheticOptions {
  std::size_t min_filler = 4;
  std::size_t max_filler = 8;
  std::size_t max_entities = 3;
  // Probability that a sentence uses a single entity type.
  double single_type_rate = 0.6;
};

// Person, Location, Organization, Product, Event with descriptions.
std::vector<EntityTypeDef> synthetic_types();

std::vector<NerExample> synthetic_corpus(std::size_t sentences, std::uint64_t seed,
                                         const SyntheticOptions& options = {});

}  // namespace cllmfs
