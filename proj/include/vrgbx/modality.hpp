// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace vrgbx {

/// Intrinsic modality. The integer codes are stable: they index the columns
/// of the TIE type encoder and the on-disk channel names.
enum class ModalityId : int { Albedo = 0, Normal = 1, Material = 2, Irradiance = 3 };

inline constexpr int kModalityCount = 4;
inline constexpr std::array<ModalityId, kModalityCount> kAllModalities = {
    ModalityId::Albedo, ModalityId::Normal, ModalityId::Material, ModalityId::Irradiance};

inline constexpr int code(ModalityId m) { return static_cast<int>(m); }

inline ModalityId modality_from_code(int c) {
    if (c < 0 || c >= kModalityCount) throw std::out_of_range("modality code " + std::to_string(c));
    return static_cast<ModalityId>(c);
}

inline std::string_view to_string(ModalityId m) {
    switch (m) {
        case ModalityId::Albedo: return "albedo";
        case ModalityId::Normal: return "normal";
        case ModalityId::Material: return "material";
        case ModalityId::Irradiance: return "irradiance";
    }
    return "unknown";
}

inline ModalityId modality_from_string(std::string_view s) {
    for (ModalityId m : kAllModalities) {
        if (to_string(m) == s) return m;
    }
    throw std::invalid_argument("unknown modality '" + std::string(s) + "'");
}

/// Set of modalities as a 4-bit mask.
class ModalitySet {
public:
    constexpr ModalitySet() = default;
    constexpr ModalitySet(std::initializer_list<ModalityId> ms) {
        for (ModalityId m : ms) insert(m);
    }

    constexpr void insert(ModalityId m) { bits_ |= 1u << code(m); }
    constexpr bool contains(ModalityId m) const { return (bits_ >> code(m)) & 1u; }
    constexpr bool empty() const { return bits_ == 0; }
    constexpr bool full() const { return bits_ == 0xFu; }
    constexpr int size() const { return std::popcount(bits_); }
    constexpr ModalitySet operator|(ModalitySet o) const { return ModalitySet(bits_ | o.bits_); }
    constexpr ModalitySet complement() const { return ModalitySet(~bits_ & 0xFu); }
    constexpr bool operator==(const ModalitySet&) const = default;

    /// Members in ascending code order.
    std::vector<ModalityId> members() const {
        std::vector<ModalityId> out;
        for (ModalityId m : kAllModalities)
            if (contains(m)) out.push_back(m);
        return out;
    }

private:
    constexpr explicit ModalitySet(unsigned bits) : bits_(bits) {}
    unsigned bits_ = 0;
};

}  // namespace vrgbx
