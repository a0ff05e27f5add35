// SPDX-License-Identifier: Apache-2.0

#include "tape/numeric/params.hpp"

namespace tape {

std::string_view role_name(Role role) {
    switch (role) {
        case Role::Backbone: return "backbone";
        case Role::DomainAdapter: return "domain_adapter";
        case Role::TaskAdapter: return "task_adapter";
        case Role::Decoder: return "decoder";
        case Role::Head: return "head";
    }
    return "unknown";
}

Role parse_role(std::string_view name) {
    for (auto r : kAllRoles)
        if (role_name(r) == name) return r;
    throw ConfigError("unknown role '" + std::string(name) + "'");
}

Role role_from_code(std::uint8_t code) {
    if (code > static_cast<std::uint8_t>(Role::Head)) {
        throw FormatError("invalid role tag " + std::to_string(code));
    }
    return static_cast<Role>(code);
}

}  // namespace tape
