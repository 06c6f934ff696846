#pragma once

#include "gapelab/numerics.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gapelab::niah {

using Token = std::uint8_t;

/// Fixed token ids: digits 0-9, KEY, '=', '?', then 14 fillers.
struct NiahVocab {
    static constexpr Token kFirstDigit = 0;
    static constexpr std::size_t kDigits = 10;
    static constexpr Token kKey = 10;
    static constexpr Token kEq = 11;
    static constexpr Token kQuery = 12;
    static constexpr Token kFirstFiller = 13;
    static constexpr std::size_t kFillers = 14;
    static constexpr std::size_t kSize = 27;

    static bool is_digit(Token t) { return t < kDigits; }
    static bool is_filler(Token t) { return t >= kFirstFiller && t < kSize; }
};

enum class Regime { First, Last, Middle };

Regime parse_regime(const std::string& s);
std::string regime_name(Regime r);

struct NiahSample {
    std::vector<Token> tokens;
    std::vector<std::size_t> needle_positions;  // index of each KEY
    std::vector<std::uint8_t> needle_digits;
    std::uint8_t target = 0;
    Regime regime = Regime::First;

    std::size_t length() const { return tokens.size(); }
    /// Position of the digit token that holds the answer.
    std::size_t target_digit_position() const;
};

/// Needles per sequence: floor(L / 64).
std::size_t default_needle_count(std::size_t length);

/// Splits the prefix 0..L-2 into n near-equal chunks and draws one needle start
/// per chunk; the remaining prefix positions are uniform fillers and the last
/// token is the query.
NiahSample generate(std::size_t length, Regime regime, Rng& rng,
                    std::optional<std::size_t> n_override = std::nullopt);

/// Sample `index` of a dataset seeded with `seed`.
NiahSample generate_indexed(std::size_t length, Regime regime, std::uint64_t seed, std::uint64_t index,
                            std::optional<std::size_t> n_override = std::nullopt);

struct Decoded {
    std::uint8_t digit = 0;
    bool correct = false;
};

/// Argmax over the 10 digit logits; ties resolve to the lowest digit.
Decoded decode_target(const NiahSample& sample, std::span<const double> digit_logits);

/// Scans for KEY tokens and returns (position, digit) of every complete triple.
std::vector<std::pair<std::size_t, std::uint8_t>> parse_needles(std::span<const Token> tokens);

struct DatasetHeader {
    std::size_t length = 0;
    std::size_t needles = 0;
    Regime regime = Regime::First;
    std::uint64_t seed = 0;
    std::size_t count = 0;
};

/// Line-oriented text format:
///   niah L=<L> n=<n> regime=<first|last|middle> seed=<seed> count=<count>
///   <token ids> | <pos>:<digit> ... | <target>
void write_dataset(std::ostream& os, const DatasetHeader& header, std::span<const NiahSample> samples);
std::pair<DatasetHeader, std::vector<NiahSample>> read_dataset(std::istream& is);

} // namespace gapelab::niah
